"""
Module: output_utils.py

Writers for Monte Carlo summary tables (CSV), their SVG charts and simulated datasets.
Charts use the Agg backend with a fixed hash salt and no date metadata, so identical
tables produce identical SVG bytes.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

plt.rcParams["svg.hashsalt"] = "panelbias"

SUMMARY_COLUMNS = ["experiment", "panel", "subjects", "x", "estimator", "metric", "value", "stderr", "reps"]
SUMMARY_DTYPES: Dict[str, str] = {
    "experiment": "object",
    "panel": "object",
    "subjects": "Int64",
    "x": "Int64",
    "estimator": "object",
    "metric": "object",
    "value": "float64",
    "stderr": "float64",
    "reps": "Int64",
}
FLOAT_FORMAT = "%.17g"

MARKERS = {
    "OLS": "+",
    "GLS-known": "o",
    "GLS-feasible": "x",
    "FE": "s",
    "RE-quasi": "^",
    "class-means": "P",
    "theory": ".",
}


def empty_summary_table() -> pd.DataFrame:
    return pd.DataFrame({col: pd.Series(dtype=dtype) for col, dtype in SUMMARY_DTYPES.items()})


def write_summary_csv(table: pd.DataFrame, path) -> Path:
    """Write a summary table with full float precision. An empty table yields a header-only file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.reindex(columns=SUMMARY_COLUMNS).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_summary_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype=SUMMARY_DTYPES, keep_default_na=False, na_values={
        "subjects": [""], "x": [""], "value": [""], "stderr": [""], "reps": [""],
    })


def _series_label(estimator: str, metric: str, subjects, multi_metric: bool) -> str:
    label = estimator
    if multi_metric:
        label = f"{metric}" if estimator == "theory" else f"{estimator} {metric}"
    if not pd.isna(subjects):
        label = f"{label} (S={int(subjects)})"
    return label


def plot_summary_svg(table: pd.DataFrame, path, x_label: str = "T") -> Optional[Path]:
    """
    Line chart with one panel per scenario or alpha, estimators distinguished by marker.
    Returns None for an empty table.
    """
    if table.empty:
        logging.info("⚠️ Nothing to plot for %s", path)
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    panels = list(dict.fromkeys(table["panel"]))
    ncols = min(len(panels), 4)
    nrows = int(np.ceil(len(panels) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 3.0 * nrows), squeeze=False, sharey=False)
    multi_metric = table["metric"].nunique() > 1

    for ax, panel in zip(axes.ravel(), panels):
        subset = table[table["panel"] == panel]
        keys = ["estimator", "metric", "subjects"]
        for (estimator, metric, subjects), series in subset.groupby(keys, sort=False, dropna=False):
            series = series.sort_values("x")
            ax.plot(
                series["x"].astype(float),
                series["value"],
                marker=MARKERS.get(estimator, "."),
                linewidth=0.8,
                label=_series_label(estimator, metric, subjects, multi_metric),
            )
        ax.set_title(panel, fontsize=9)
        ax.set_xlabel(x_label)
        ax.tick_params(labelsize=7)
        if multi_metric:
            ax.set_yscale("log")
    for ax in axes.ravel()[len(panels):]:
        ax.set_visible(False)

    axes[0, 0].set_ylabel(", ".join(dict.fromkeys(table["metric"])))
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_dataset_csv(ds, directory) -> Tuple[Path, Path]:
    """
    Write a GeneratedDataset as two CSV files:
    scores.csv (student, t, subject, y) and design.csv (row, column, value) for nonzero Z entries.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scores_path = directory / "scores.csv"
    design_path = directory / "design.csv"

    ds.scores_frame().to_csv(scores_path, index=False, float_format=FLOAT_FORMAT)
    rows, cols = np.nonzero(ds.design.Z)
    pd.DataFrame({
        "row": rows,
        "column": [ds.design.column_names[c] for c in cols],
        "value": ds.design.Z[rows, cols],
    }).to_csv(design_path, index=False, float_format=FLOAT_FORMAT)
    logging.info("✅ Dataset written to %s", directory)
    return scores_path, design_path
