# Contains path-specific commands. Keep in project root


import os, logging
from dotenv import load_dotenv, dotenv_values
from pathlib import Path

logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()]
)


"""
--- RUNTIME SWITCHES ---

Purpose:
Reads environment switches shared by the experiment runner, the CLI and the tests.

✅ Define these in your `.env` file (or export them) for local runs.

--- Switches ---

1. RUN_CONTEXT
    - "cli"  → normal batch runs (DEFAULT)
    - "test" → used by the test suite; identical behaviour
    Written to the run_context column of every event log row.

2. OUTPUT_DIR
    Directory for CSV tables, SVG charts and the event log. Defaults to ./results

3. EVENT_LOG
    Path of the CSV event log. When unset, each run logs to <output_dir>/event_log.csv
    of that run (the --out directory for CLI runs).

4. THREADS
    Worker processes for Monte Carlo replications. Defaults to 1 (run inline).
"""


def env_config():
    """
    Loads runtime settings from .env and the process environment.
    Returns a normalized config dictionary.

    Usage:
    from env_config import env_config
    config = env_config()
    out_dir = config["OUTPUT_DIR"]
    """

    config = {}

    # Load .env if present
    ENV_FILE = os.getenv("ENV_FILE", str(Path(__file__).resolve().parent / ".env"))
    if os.path.exists(ENV_FILE):
        load_dotenv(ENV_FILE)
        logging.info("Loaded .env from %s", ENV_FILE)
    else:
        logging.debug("No .env file found at %s", ENV_FILE)

    config["RUN_CONTEXT"] = os.getenv("RUN_CONTEXT", "cli").lower()
    config["LOG_LEVEL"] = os.getenv("LOG_LEVEL", "INFO").upper()
    config["OUTPUT_DIR"] = os.getenv("OUTPUT_DIR", "results")
    config["EVENT_LOG"] = os.getenv("EVENT_LOG") or None
    try:
        config["THREADS"] = max(1, int(os.getenv("THREADS", "1")))
    except ValueError:
        logging.warning("THREADS is not an integer; falling back to 1")
        config["THREADS"] = 1
    logging.debug("Running in context: %s", config["RUN_CONTEXT"])

    # Bring in any extra .env values without overriding the normalized ones
    if os.path.exists(ENV_FILE):
        for key, value in dotenv_values(ENV_FILE).items():
            if key not in config:
                config[key] = value

    return config



# --- Published simulation constants ---

SIM_CONFIG = {
    "n_students": 1000,
    "reps": 100,
    "base_seed": 0,
    # Example 1: one factor, treatment selected on the factor
    "ex1_scenarios": (1, 2, 3, 4),
    "ex1_t_values": (3, 5, 10, 15, 20),
    "ex1_loading_range": (0.7, 0.9),
    # Example 2: two correlated factors, treatment in the final period only
    "ex2_scenarios": (1, 2, 3),
    "ex2_t_values": tuple(range(2, 21)),
    "ex2_loading_range": (0.1, 0.9),
    "ex2_factor_corr": 0.5,
    "ex2_resid_var": 0.2,
    "ex2_logodds_weight": 0.4,
    # Example 3: teacher effects with nonrandom class assignment
    "ex3_subjects": (1, 2, 3, 4),
    "ex3_alphas": (0.0, 0.3, 0.7, 1.0),
    "ex3_grades": 5,
    "ex3_class_size": 25,
    "ex3_sigma_delta2": 0.5,
    "ex3_sigma_lambda2": 0.125,
    "ex3_r": 0.3,
    "ex3_nu_delta2": 0.2,
    "ex3_nu_lambda2": 0.05,
    "ex3_sigma_eps2": 0.8,
    "ex3_selection_weights": (0.3, 0.3, 0.4),
    # Diagnostics and extensions
    "diag_t_values": (3, 5, 10, 15, 20),
    "feasible_max_iter": 50,
    "feasible_tol": 1e-6,
}


def sim_config(key: str):
    """
    Retrieve a required constant from SIM_CONFIG.

    Args:
        key (str): The configuration key to retrieve.

    Returns:
        Any: The value associated with the key in SIM_CONFIG.

    Raises:
        KeyError: If the key is not present in SIM_CONFIG.
        ValueError: If the value is None.
    """
    if key not in SIM_CONFIG:
        raise KeyError(f"Missing required config key '{key}' in SIM_CONFIG")

    value = SIM_CONFIG[key]
    if value is None:
        raise ValueError(f"Config key '{key}' is set to None in SIM_CONFIG")

    return value
