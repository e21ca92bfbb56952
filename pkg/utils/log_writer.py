"""
Module: log_writer.py

Provides a reusable logging function for the runner and CLI to append entries to the
CSV event log (EVENT_LOG).
"""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Dict, List, Any

import pandas as pd

from env_config import env_config

config = env_config()

EVENT_COLUMNS = ["timestamp", "run_context", "action", "experiment", "detail"]


def resolve_event_log(output_dir=None) -> Path:
    """EVENT_LOG when set, otherwise event_log.csv inside `output_dir` (default OUTPUT_DIR)."""
    if config.get("EVENT_LOG"):
        return Path(config["EVENT_LOG"])
    return Path(output_dir or config["OUTPUT_DIR"]) / "event_log.csv"


def log_event(action: str, experiment: str, detail: str = "", event_log_path: Optional[str] = None, extra_columns: Optional[List[Any]] = None):
    """
    Append a single row to the event log.

    Args:
        action (str): Action type (e.g., 'run_started')
        experiment (str): Experiment name
        detail (str): Free-text detail, e.g. the grid point
        event_log_path (str): Optional path of the CSV log. Falls back to resolve_event_log().
        extra_columns: Optional list of extra values.

    Returns:
        dict: Logged event with timestamp
    """

    event = {
        "action": action,
        "experiment": experiment,
        "detail": detail,
        "extra_columns": extra_columns
    }

    logged = log_events([event], event_log_path)
    return logged[0] if logged else event


def log_events(
    events: List[Dict[str, Any]],
    event_log_path: Optional[str] = None,
) -> List[Dict[str, Any]]:
    """
    Append multiple rows to the event log and return the timestamped events.

    Args:
        events: List of dictionaries in the form:
            {
                "action": str,
                "experiment": str,
                "detail": str,
                "extra_columns": Optional[List[Any]]
            }
        event_log_path (str): Optional path of the CSV log. Falls back to resolve_event_log().

    Returns:
        List[dict]: Timestamped event dictionaries. Empty if the log could not be written.
    """
    logged_events = []

    try:
        path = Path(event_log_path) if event_log_path else resolve_event_log()
        path.parent.mkdir(parents=True, exist_ok=True)

        rows = []
        for e in events:
            timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            event = {
                "timestamp": timestamp,
                "run_context": config["RUN_CONTEXT"],
                "action": e["action"],
                "experiment": e["experiment"],
                "detail": e.get("detail", ""),
            }
            row_data = dict(event)

            if e.get("extra_columns"):
                event["extra_columns"] = e["extra_columns"]
                for idx, extra_val in enumerate(e["extra_columns"]):
                    row_data[f"extra_{idx+1}"] = extra_val

            rows.append(row_data)
            logged_events.append(event)

        # Keep rows aligned with the existing header
        if path.exists() and path.stat().st_size > 0:
            headers = list(pd.read_csv(path, nrows=0).columns)
            write_header = False
        else:
            extras = sorted({k for r in rows for k in r if k not in EVENT_COLUMNS}, key=lambda k: int(k.split("_")[1]))
            headers = EVENT_COLUMNS + extras
            write_header = True

        frame = pd.DataFrame(rows).reindex(columns=headers)
        frame.to_csv(path, mode="a", header=write_header, index=False)
        logging.debug("Event log written to: %s", path)

    except Exception as e:
        logging.error("Failed to append log batch: %s", e)
        return []

    return logged_events


def print_log_link(event_log_path: Optional[str] = None):
    log_path = (Path(event_log_path) if event_log_path else resolve_event_log()).resolve()
    logging.info("📄 Event log written to: %s", log_path)
