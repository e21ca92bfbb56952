"""
Command-line entry point.

    python cli.py run example1.cfg --reps 20 --threads 4
    python cli.py diagnose diagnostics.cfg --out results/theory
    python cli.py validate example3.cfg
    python cli.py generate example2.cfg --out results/data

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from diagnose import summarize_profile
from experiment_config import ExperimentConfig, parse_config, serialize_config
from run_experiment import emit_outputs, run_experiment, write_datasets
from utils.errors import ConfigError, PanelValueError
from utils.output_utils import FLOAT_FORMAT

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelbias",
        description="Monte Carlo experiments and diagnostics for FE, RE and GLS panel estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run the experiment named in the config"),
        ("diagnose", "evaluate the bias-compression conditions over the config's T grid"),
        ("validate", "parse and validate the config, then print it with defaults filled"),
        ("generate", "write the first replication of every grid point as scores.csv and design.csv"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="key-value experiment file")
        cmd.add_argument("--reps", type=int, help="Monte Carlo replications per grid point")
        cmd.add_argument("--seed", type=int, dest="base_seed", help="base seed")
        cmd.add_argument("--out", dest="output_dir", help="output directory")
        cmd.add_argument("--threads", type=int, help="worker processes for replications")
        cmd.add_argument("--svg", action=argparse.BooleanOptionalAction, default=None, help="write SVG charts")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = ("reps", "base_seed", "output_dir", "threads", "svg")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    if args.command == "diagnose":
        overrides.update(experiment="diagnostics", estimators=(), metrics=())
    return overrides


def _formats(cfg: ExperimentConfig) -> Tuple[str, ...]:
    return ("csv", "svg") if cfg.svg else ("csv",)


def _diagnose(cfg: ExperimentConfig) -> List[Path]:
    summary = run_experiment(cfg)
    written = emit_outputs(summary, cfg.output_dir, _formats(cfg))
    out = Path(cfg.output_dir)
    profile_path = out / "diagnostics_profile.csv"
    status_path = out / "diagnostics_status.csv"
    summarize_profile(summary.report).to_csv(profile_path, index=False, float_format=FLOAT_FORMAT)
    status = summary.status.copy()
    status["issues"] = status["issues"].apply("; ".join)
    status.to_csv(status_path, index=False, float_format=FLOAT_FORMAT)
    return written + [profile_path, status_path]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        if args.command == "validate":
            print(serialize_config(cfg), end="")
            logging.info("✅ %s is valid (%d grid points)", args.config, len(cfg.grid()))
            return EXIT_OK
        if args.command == "generate":
            written = write_datasets(cfg)
        elif args.command == "diagnose":
            written = _diagnose(cfg)
        else:
            summary = run_experiment(cfg)
            written = emit_outputs(summary, cfg.output_dir, _formats(cfg))
    except (ConfigError, PanelValueError, OSError) as e:
        logging.error("❌ %s", e)
        return EXIT_VALIDATION
    except np.linalg.LinAlgError as e:
        logging.error("❌ Numerical failure: %s", e)
        return EXIT_NUMERICAL

    logging.info("✅ Number of files written: %d", len(written))
    for path in written:
        logging.info("   %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
