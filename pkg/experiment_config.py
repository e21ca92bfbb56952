"""
Module: experiment_config.py

Key-value experiment files for the Monte Carlo harness.

    # example2.cfg
    experiment = example2
    t_values = 2..20
    estimators = OLS, GLS-known, GLS-feasible
    reps = 100

Keys match the ExperimentConfig fields. Lists are comma separated and integer lists
also accept an inclusive range `a..b`. Anything left out is filled from SIM_CONFIG.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from env_config import env_config, sim_config
from utils.errors import ConfigError

config = env_config()


EXPERIMENTS = ("example1", "example2", "example3", "diagnostics")

APPLICABLE_ESTIMATORS = {
    "example1": ("OLS", "GLS-known", "GLS-feasible"),
    "example2": ("OLS", "FE", "GLS-known", "GLS-feasible"),
    "example3": ("class-means", "OLS", "GLS-known", "FE"),
    "diagnostics": (),
}

DEFAULT_ESTIMATORS = {
    "example1": ("OLS", "GLS-known"),
    "example2": ("OLS", "GLS-known", "GLS-feasible"),
    "example3": ("class-means", "OLS", "GLS-known"),
    "diagnostics": (),
}

# std_bias is the signed per-replication error; its Monte Carlo mean is the bias itself
APPLICABLE_METRICS = {
    "example1": ("std_abs_bias", "std_bias"),
    "example2": ("std_abs_bias", "std_bias"),
    "example3": ("teacher_var_fraction",),
    "diagnostics": (),
}

DEFAULT_METRICS = {
    "example1": ("std_abs_bias",),
    "example2": ("std_abs_bias",),
    "example3": ("teacher_var_fraction",),
    "diagnostics": (),
}


@dataclass(frozen=True)
class GridPoint:
    index: int
    scenario: Optional[int] = None
    T: Optional[int] = None
    subjects: Optional[int] = None
    alpha: Optional[float] = None

    @property
    def panel(self) -> str:
        if self.alpha is not None:
            return f"alpha={self.alpha:g}"
        if self.scenario is not None:
            return f"scenario={self.scenario}"
        return "theory"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    scenarios: Tuple[int, ...] = ()
    t_values: Tuple[int, ...] = ()
    subjects: Tuple[int, ...] = ()
    alphas: Tuple[float, ...] = ()
    reps: int = field(default_factory=lambda: sim_config("reps"))
    base_seed: int = field(default_factory=lambda: sim_config("base_seed"))
    estimators: Tuple[str, ...] = ()
    metrics: Tuple[str, ...] = ()
    output_dir: str = "results"
    n: int = field(default_factory=lambda: sim_config("n_students"))
    missing_rate: float = 0.0
    threads: int = 1
    svg: bool = True

    def grid(self) -> List[GridPoint]:
        if self.experiment == "example3":
            combos = [dict(subjects=s, alpha=a) for s in self.subjects for a in self.alphas]
        elif self.experiment == "diagnostics":
            combos = [dict(T=T) for T in self.t_values]
        else:
            combos = [dict(scenario=s, T=T) for s in self.scenarios for T in self.t_values]
        return [GridPoint(index=i, **combo) for i, combo in enumerate(combos)]


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))
_INT_LISTS = ("scenarios", "t_values", "subjects")
_INTS = ("reps", "base_seed", "n", "threads")


def _parse_int_list(text: str) -> Tuple[int, ...]:
    values: List[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if ".." in part:
            start, stop = (int(x) for x in part.split(".."))
            values.extend(range(start, stop + 1))
        else:
            values.append(int(part))
    return tuple(values)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


def _parse_value(key: str, text: str) -> Any:
    if key in _INT_LISTS:
        return _parse_int_list(text)
    if key == "alphas":
        return tuple(float(p) for p in text.split(",") if p.strip())
    if key in ("estimators", "metrics"):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if key in _INTS:
        return int(text)
    if key == "missing_rate":
        return float(text)
    if key == "svg":
        return _parse_bool(text)
    return text.strip()


def with_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill empty grid and estimator fields from the published settings of the experiment."""
    name = cfg.experiment
    updates: Dict[str, Any] = {}
    if name in ("example1", "example2"):
        prefix = "ex1" if name == "example1" else "ex2"
        if not cfg.scenarios:
            updates["scenarios"] = tuple(sim_config(f"{prefix}_scenarios"))
        if not cfg.t_values:
            updates["t_values"] = tuple(sim_config(f"{prefix}_t_values"))
    elif name == "example3":
        if not cfg.subjects:
            updates["subjects"] = tuple(sim_config("ex3_subjects"))
        if not cfg.alphas:
            updates["alphas"] = tuple(sim_config("ex3_alphas"))
    elif name == "diagnostics" and not cfg.t_values:
        updates["t_values"] = tuple(sim_config("diag_t_values"))
    if not cfg.estimators and name in DEFAULT_ESTIMATORS:
        updates["estimators"] = DEFAULT_ESTIMATORS[name]
    if not cfg.metrics and name in DEFAULT_METRICS:
        updates["metrics"] = DEFAULT_METRICS[name]
    return replace(cfg, **updates) if updates else cfg


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Raise ConfigError listing every offending key."""
    offending: List[str] = []
    name = cfg.experiment
    if name not in EXPERIMENTS:
        raise ConfigError(f"Unknown experiment '{name}'; expected one of {', '.join(EXPERIMENTS)}", ["experiment"])

    if cfg.reps < 1:
        offending.append("reps")
    if cfg.n < 1:
        offending.append("n")
    if cfg.threads < 1:
        offending.append("threads")
    if not 0.0 <= cfg.missing_rate < 1.0 or (cfg.missing_rate > 0 and name != "example2"):
        offending.append("missing_rate")

    allowed = APPLICABLE_ESTIMATORS[name]
    bad_estimators = [e for e in cfg.estimators if e not in allowed]
    if bad_estimators or len(set(cfg.estimators)) != len(cfg.estimators):
        offending.append("estimators")
    if cfg.missing_rate > 0 and "GLS-feasible" in cfg.estimators and "estimators" not in offending:
        offending.append("estimators")
    metrics = APPLICABLE_METRICS[name]
    if any(m not in metrics for m in cfg.metrics) or len(set(cfg.metrics)) != len(cfg.metrics):
        offending.append("metrics")

    if name in ("example1", "example2"):
        valid_scenarios = (1, 2, 3, 4) if name == "example1" else (1, 2, 3)
        if not cfg.scenarios or any(s not in valid_scenarios for s in cfg.scenarios):
            offending.append("scenarios")
        if not cfg.t_values or min(cfg.t_values) < 1:
            offending.append("t_values")
    elif name == "example3":
        if not cfg.subjects or min(cfg.subjects) < 1:
            offending.append("subjects")
        if not cfg.alphas or any(not 0.0 <= a <= 1.0 for a in cfg.alphas):
            offending.append("alphas")
        if cfg.n % sim_config("ex3_class_size"):
            offending.append("n")
    elif not cfg.t_values or min(cfg.t_values) < 2:
        offending.append("t_values")

    if offending:
        if bad_estimators:
            logging.error("❌ Estimators not applicable to %s: %s", name, ", ".join(bad_estimators))
        raise ConfigError("Invalid experiment configuration", dict.fromkeys(offending))
    return cfg


def parse_config(path, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Parse a key-value experiment file, apply `overrides` (already typed, e.g. CLI flags),
    fill defaults and validate.

    Raises:
        ConfigError: missing file, unknown keys, unparsable values or schema violations.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("Config file not found", [str(path)])

    raw = {k.strip().lower(): v for k, v in dotenv_values(path, interpolate=False).items()}
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError("Unknown config keys", unknown)

    values: Dict[str, Any] = {}
    unparsable: List[str] = []
    for key, text in raw.items():
        if text is None:
            unparsable.append(key)
            continue
        try:
            values[key] = _parse_value(key, text)
        except ValueError:
            unparsable.append(key)
    if unparsable:
        raise ConfigError("Could not parse config values", unparsable)

    values.setdefault("threads", config["THREADS"])
    values.setdefault("output_dir", config["OUTPUT_DIR"])
    values.update(overrides or {})
    if "experiment" not in values:
        raise ConfigError("Missing required config key", ["experiment"])

    cfg = ExperimentConfig(**values)
    cfg = validate_config(with_defaults(cfg))
    logging.info("Loaded %s config from %s (%d grid points, %d reps)", cfg.experiment, path, len(cfg.grid()), cfg.reps)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render a config in the key-value format read by parse_config."""
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
