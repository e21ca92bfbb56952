"""
Monte Carlo driver for the three simulation designs and the theory diagnostics.

Every grid point runs `reps` independent replications. Replication seeds are the
SeedSequence entropy (base_seed, grid_index, rep), so results do not depend on how
replications are spread over worker processes. Aggregation follows grid order then
replication order.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from diagnose import build_theorem_report
from env_config import sim_config
from experiment_config import DEFAULT_METRICS, ExperimentConfig, GridPoint
from utils.errors import PanelValueError
from utils.estimators import class_means, feasible_gls, fixed_effects, gls_known_R, ols
from utils.log_writer import log_event, print_log_link, resolve_event_log
from utils.output_utils import (
    SUMMARY_COLUMNS,
    SUMMARY_DTYPES,
    empty_summary_table,
    plot_summary_svg,
    write_dataset_csv,
    write_summary_csv,
)
from utils.panel_core import assemble_block_covariance, validate_design
from utils.simgen import (
    Example1Config,
    Example2Config,
    GeneratedDataset,
    TeacherSimConfig,
    apply_mar_mask,
    gen_example1,
    gen_example2,
    gen_teacher_scores,
    grade_marginal_variances,
)


Row = Dict[str, Any]


@dataclass(frozen=True, eq=False)
class McSummary:
    """Aggregated Monte Carlo metrics, one row per grid point x estimator x metric (x grade for example3)."""

    experiment: str
    table: pd.DataFrame
    report: Optional[pd.DataFrame] = None
    status: Optional[pd.DataFrame] = None

    @property
    def empty(self) -> bool:
        return self.table.empty


def replication_seed(base_seed: int, grid_index: int, rep: int) -> Tuple[int, int, int]:
    return (int(base_seed), int(grid_index), int(rep))


# --- Metrics ---


def metric_standardized_abs_bias(
    estimates: np.ndarray,
    true_theta: np.ndarray,
    standardizer: float,
    columns: Optional[Sequence[int]] = None,
) -> float:
    """Mean of |theta_hat_j - theta_j| / SD over the selected (treatment) coefficients."""
    estimates = np.asarray(estimates, dtype=float).ravel()
    true_theta = np.asarray(true_theta, dtype=float).ravel()
    if estimates.shape != true_theta.shape:
        raise PanelValueError(f"Estimates {estimates.shape} and truth {true_theta.shape} do not conform")
    if not standardizer or not np.isfinite(standardizer):
        raise PanelValueError("Standardizer must be a finite non-zero standard deviation")
    idx = list(range(estimates.size)) if columns is None else list(columns)
    return float(np.mean(np.abs(estimates[idx] - true_theta[idx])) / abs(standardizer))


def metric_standardized_bias(
    estimates: np.ndarray,
    true_theta: np.ndarray,
    standardizer: float,
    columns: Optional[Sequence[int]] = None,
) -> float:
    """
    Signed mean of (theta_hat_j - theta_j) / SD. Averaged over replications it estimates
    the bias itself, without the noise floor that |.| adds per replication.
    """
    estimates = np.asarray(estimates, dtype=float).ravel()
    true_theta = np.asarray(true_theta, dtype=float).ravel()
    if estimates.shape != true_theta.shape:
        raise PanelValueError(f"Estimates {estimates.shape} and truth {true_theta.shape} do not conform")
    if not standardizer or not np.isfinite(standardizer):
        raise PanelValueError("Standardizer must be a finite non-zero standard deviation")
    idx = list(range(estimates.size)) if columns is None else list(columns)
    return float(np.mean(estimates[idx] - true_theta[idx]) / abs(standardizer))


BIAS_METRICS = {
    "std_abs_bias": metric_standardized_abs_bias,
    "std_bias": metric_standardized_bias,
}


def metric_teacher_variance_fraction(teacher_estimates: pd.DataFrame, grade: int, marginal_var: float) -> float:
    """
    Variance (ddof=1) of estimated teacher effects within grade x subject, averaged over
    subjects and divided by the grade's marginal score variance.

    Args:
        teacher_estimates: columns subject, grade, class, estimate.
    """
    in_grade = teacher_estimates[teacher_estimates["grade"] == grade]
    counts = in_grade.groupby("subject")["estimate"].count()
    if counts.empty or counts.min() < 2:
        raise PanelValueError(f"Need at least 2 teachers per subject in grade {grade}")
    if marginal_var <= 0:
        raise PanelValueError("Marginal variance must be positive")
    per_subject = in_grade.groupby("subject")["estimate"].var(ddof=1)
    return float(per_subject.mean() / marginal_var)


# --- Replications ---


def standardizer(experiment: str, ds: GeneratedDataset) -> float:
    """Final-period marginal SD for example2, root mean marginal variance otherwise."""
    R1 = ds.truth.implied_covariance()
    if experiment == "example2":
        return float(np.sqrt(R1[-1, -1]))
    return float(np.sqrt(np.mean(np.diag(R1))))


def _fit_fixed_effects(ds: GeneratedDataset, drop: Sequence[str] = ()):
    """Within estimator with reference columns removed; dropped coefficients are reported as 0."""
    design = ds.design
    dropped = set(drop)
    if not dropped:
        dropped = set(validate_design(design, with_student_indicators=True).dependent_columns)
    keep = [j for j, name in enumerate(design.column_names) if name not in dropped]
    theta = np.zeros(design.k)
    theta[keep] = fixed_effects(design.select_columns(keep), ds.y).theta
    return theta


def _fit(estimator: str, ds: GeneratedDataset, experiment: str, mask=None) -> np.ndarray:
    if estimator == "OLS":
        return ols(ds.design, ds.y).theta
    if estimator == "GLS-known":
        return gls_known_R(ds.design, ds.y, assemble_block_covariance(ds.truth), mask).theta
    if estimator == "GLS-feasible":
        return feasible_gls(
            ds.design, ds.y, max_iter=sim_config("feasible_max_iter"), tol=sim_config("feasible_tol")
        ).theta
    if estimator == "FE":
        reference = ("mean_t1",) if experiment == "example2" else ()
        return _fit_fixed_effects(ds, reference)
    raise PanelValueError(f"Estimator '{estimator}' is not available for {experiment}")


def generate_dataset(cfg: ExperimentConfig, point: GridPoint, rep: int) -> GeneratedDataset:
    """The dataset replication `rep` of `point` fits, before any MAR masking."""
    seed = replication_seed(cfg.base_seed, point.index, rep)
    if cfg.experiment == "example1":
        return gen_example1(Example1Config(scenario=point.scenario, T=point.T, n=cfg.n, seed=seed))
    if cfg.experiment == "example2":
        return gen_example2(Example2Config(scenario=point.scenario, T=point.T, n=cfg.n, seed=seed))
    if cfg.experiment == "example3":
        return gen_teacher_scores(TeacherSimConfig(n=cfg.n, S=point.subjects, alpha=point.alpha, seed=seed))
    raise PanelValueError(f"Experiment '{cfg.experiment}' does not simulate data")


def _replicate_examples(cfg: ExperimentConfig, point: GridPoint, rep: int) -> List[Row]:
    ds = generate_dataset(cfg, point, rep)
    sd = standardizer(cfg.experiment, ds)

    mask = None
    if cfg.missing_rate > 0:
        seed = replication_seed(cfg.base_seed, point.index, rep)
        ds, mask = apply_mar_mask(ds, cfg.missing_rate, seed + (1,))

    rows = []
    for estimator in cfg.estimators:
        theta = _fit(estimator, ds, cfg.experiment, mask)
        for metric in cfg.metrics or DEFAULT_METRICS[cfg.experiment]:
            value = BIAS_METRICS[metric](theta, ds.true_theta, sd, ds.treatment_columns)
            rows.append(dict(x=point.T, estimator=estimator, metric=metric, value=value))
    return rows


def _teacher_frame(theta: np.ndarray, G: int, n_classes: int) -> pd.DataFrame:
    idx = np.arange(theta.size)
    return pd.DataFrame({
        "subject": idx // (G * n_classes),
        "grade": (idx // n_classes) % G,
        "class": idx % n_classes,
        "estimate": theta,
    })


def _replicate_teacher(cfg: ExperimentConfig, point: GridPoint, rep: int) -> List[Row]:
    seed = replication_seed(cfg.base_seed, point.index, rep)
    tcfg = TeacherSimConfig(n=cfg.n, S=point.subjects, alpha=point.alpha, seed=seed)
    ds = generate_dataset(cfg, point, rep)
    marginal = grade_marginal_variances(tcfg)

    rows = []
    for estimator in cfg.estimators:
        if estimator == "class-means":
            scores = ds.scores_frame()
            scores["grade"] = (scores["t"] - 1) // tcfg.S
            scores["subject"] = scores["subject"] - 1
            scores = scores.merge(ds.assignments[["student", "grade", "class"]], on=["student", "grade"])
            estimates = class_means(scores, tcfg.n_classes)
        else:
            estimates = _teacher_frame(_fit(estimator, ds, cfg.experiment), tcfg.G, tcfg.n_classes)
        for g in range(tcfg.G):
            value = metric_teacher_variance_fraction(estimates, g, marginal[g])
            rows.append(dict(x=g + 1, estimator=estimator, metric="teacher_var_fraction", value=value))
    return rows


def _run_replication(task: Tuple[ExperimentConfig, GridPoint, int]) -> List[Row]:
    """Top-level so it can be pickled into worker processes."""
    cfg, point, rep = task
    if cfg.experiment == "example3":
        rows = _replicate_teacher(cfg, point, rep)
    else:
        rows = _replicate_examples(cfg, point, rep)
    for row in rows:
        row.update(panel=point.panel, subjects=point.subjects)
    return rows


# --- Aggregation ---


def _aggregate(experiment: str, rows: List[Row]) -> pd.DataFrame:
    if not rows:
        return empty_summary_table()
    frame = pd.DataFrame(rows)
    frame["subjects"] = frame["subjects"].astype("Int64")
    keys = ["panel", "subjects", "x", "estimator", "metric"]
    stats = (
        frame.groupby(keys, sort=False, dropna=False)["value"]
        .agg(value="mean", sd="std", reps="count")
        .reset_index()
    )
    stats["stderr"] = np.where(stats["reps"] > 1, stats["sd"] / np.sqrt(stats["reps"]), 0.0)
    stats["experiment"] = experiment
    return stats[SUMMARY_COLUMNS].astype(SUMMARY_DTYPES)


def _diagnostics_summary(cfg: ExperimentConfig) -> Tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    report_df, status_df = build_theorem_report(cfg.t_values, seed=cfg.base_seed, n=cfg.n)
    rows = [
        dict(
            panel=f"family={r.family}",
            subjects=None,
            x=r.T,
            estimator="GLS-known" if r.metric == "rowsum_condition" else "theory",
            metric=r.metric,
            value=r.value,
        )
        for r in report_df.itertuples(index=False)
    ]
    return _aggregate("diagnostics", rows), report_df, status_df


def _report_progress(cfg: ExperimentConfig, grid: List[GridPoint], done: int, event_log: str) -> None:
    if done % cfg.reps:
        return
    point = grid[done // cfg.reps - 1]
    logging.info("Grid point %d/%d done (%s)", point.index + 1, len(grid), point.panel)
    log_event("grid_point_done", cfg.experiment, f"{point.panel} T={point.T} subjects={point.subjects}", event_log)


def run_experiment(cfg: ExperimentConfig) -> McSummary:
    """
    Run every grid point of `cfg` and aggregate the per-replication metrics.
    Numerical failures propagate after being recorded in the event log.
    """
    event_log = str(resolve_event_log(cfg.output_dir))
    grid = cfg.grid()
    log_event("run_started", cfg.experiment, f"{len(grid)} grid points x {cfg.reps} reps", event_log)

    try:
        report_df = status_df = None
        if cfg.experiment == "diagnostics":
            table, report_df, status_df = _diagnostics_summary(cfg)
        else:
            tasks = [(cfg, point, rep) for point in grid for rep in range(cfg.reps)]
            results: List[List[Row]] = []
            if cfg.threads > 1:
                with ProcessPoolExecutor(max_workers=cfg.threads) as executor:
                    chunk = max(1, cfg.reps // cfg.threads)
                    for done, rows in enumerate(executor.map(_run_replication, tasks, chunksize=chunk), 1):
                        results.append(rows)
                        _report_progress(cfg, grid, done, event_log)
            else:
                for done, task in enumerate(tasks, 1):
                    results.append(_run_replication(task))
                    _report_progress(cfg, grid, done, event_log)
            table = _aggregate(cfg.experiment, [row for rows in results for row in rows])
    except Exception as e:
        log_event("run_failed", cfg.experiment, str(e), event_log)
        raise

    log_event("run_finished", cfg.experiment, f"{len(table)} summary rows", event_log)
    logging.info("✅ %s finished: %d summary rows", cfg.experiment, len(table))
    return McSummary(cfg.experiment, table, report_df, status_df)


def _dataset_dirname(point: GridPoint) -> str:
    parts = [f"point{point.index}"]
    if point.scenario is not None:
        parts += [f"scenario{point.scenario}", f"T{point.T}"]
    if point.alpha is not None:
        parts += [f"subjects{point.subjects}", f"alpha{point.alpha:g}"]
    return "_".join(parts)


def write_datasets(cfg: ExperimentConfig, rep: int = 0) -> List[Path]:
    """
    Write replication `rep` of every grid point as a scores.csv / design.csv pair under
    <output_dir>/datasets/<point>/. With missing_rate > 0 the masked panel is written.
    """
    if cfg.experiment == "diagnostics":
        raise PanelValueError("The diagnostics experiment does not simulate data")
    root = Path(cfg.output_dir) / "datasets"
    written: List[Path] = []
    for point in cfg.grid():
        ds = generate_dataset(cfg, point, rep)
        if cfg.missing_rate > 0:
            seed = replication_seed(cfg.base_seed, point.index, rep)
            ds, _ = apply_mar_mask(ds, cfg.missing_rate, seed + (1,))
        written.extend(write_dataset_csv(ds, root / _dataset_dirname(point)))
    log_event("datasets_written", cfg.experiment, f"{len(cfg.grid())} grid points, rep {rep}",
              str(resolve_event_log(cfg.output_dir)))
    return written


def emit_outputs(summary: McSummary, output_dir, formats: Sequence[str] = ("csv", "svg")) -> List[Path]:
    """Write summary_<experiment>.csv and, when requested, summary_<experiment>.svg."""
    output_dir = Path(output_dir)
    written = []
    if "csv" in formats:
        written.append(write_summary_csv(summary.table, output_dir / f"summary_{summary.experiment}.csv"))
    if "svg" in formats:
        x_label = "grade" if summary.experiment == "example3" else "T"
        svg = plot_summary_svg(summary.table, output_dir / f"summary_{summary.experiment}.svg", x_label)
        if svg is not None:
            written.append(svg)
    event_log = str(resolve_event_log(output_dir))
    log_event("outputs_written", summary.experiment, ", ".join(p.name for p in written), event_log)
    print_log_link(event_log)
    return written
