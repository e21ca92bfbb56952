"""
Module: estimators.py

Estimators for stacked panel designs: OLS, fixed effects (within), quasi-demeaned
random effects, GLS with a known per-student covariance, and feasible GLS with the
covariance estimated from residuals by iterated method of moments. Classroom means
are provided for the teacher simulation.

Normal equations are solved with a Cholesky factorization. A failed or near-singular
factorization is reported as RankDeficiencyError naming the dependent columns;
there is no pseudo-inverse fallback.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from utils.errors import PanelValueError, RankDeficiencyError
from utils.panel_core import (
    PD_FLOOR,
    BlockCovariance,
    ObservationMask,
    PanelDesign,
    ScalarVarianceComponents,
    covariance_from_matrix,
    subset_block,
    validate_design,
    within_projection,
)


ESTIMATOR_TAGS = ("OLS", "FE", "RE-quasi", "GLS-known", "GLS-feasible", "class-means")
CHOLESKY_PIVOT_TOL = 1e-13
RIDGE_SCALE = 1e-8
RIDGE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class EstimateResult:
    theta: np.ndarray
    param_cov: np.ndarray
    estimator: str
    column_names: Tuple[str, ...] = ()
    r_hat: Optional[np.ndarray] = None

    def as_series(self) -> pd.Series:
        return pd.Series(self.theta, index=list(self.column_names) or None, name=self.estimator)


def _as_response(design: PanelDesign, Y) -> np.ndarray:
    y = np.asarray(Y, dtype=float).ravel()
    if y.shape[0] != design.n_rows:
        raise PanelValueError(f"Y has {y.shape[0]} entries but the design has {design.n_rows} rows")
    return y


def _solve_normal(
    design: PanelDesign,
    gram: np.ndarray,
    rhs: np.ndarray,
    context: str,
    with_student_indicators: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Solve gram @ theta = rhs; return theta and gram^-1."""
    gram = 0.5 * (gram + gram.T)
    k = gram.shape[0]
    if k == 0:
        raise PanelValueError(f"{context}: design has no columns")
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
        pivots = np.diag(factor[0]) ** 2
        if pivots.min() <= CHOLESKY_PIVOT_TOL * pivots.max():
            raise np.linalg.LinAlgError("near-singular normal matrix")
    except np.linalg.LinAlgError:
        report = validate_design(design, with_student_indicators)
        raise RankDeficiencyError(report.dependent_columns, report.rank, context)

    theta = scipy.linalg.cho_solve(factor, rhs)
    inverse = scipy.linalg.cho_solve(factor, np.eye(k))
    return theta, 0.5 * (inverse + inverse.T)


def _residual_variance(resid: np.ndarray, dof: int) -> float:
    return float(resid @ resid) / max(dof, 1)


def ols(design: PanelDesign, Y) -> EstimateResult:
    """theta = (Z'Z)^-1 Z'Y, ignoring the student structure entirely."""
    y = _as_response(design, Y)
    Z = design.Z
    theta, inverse = _solve_normal(design, Z.T @ Z, Z.T @ y, "OLS")
    s2 = _residual_variance(y - Z @ theta, design.n_rows - design.k)
    return EstimateResult(theta, s2 * inverse, "OLS", design.column_names)


def fixed_effects(design: PanelDesign, Y) -> EstimateResult:
    """
    Within estimator: regress student-demeaned Y on student-demeaned Z.

    Columns that are constant within every student are not identified and raise
    RankDeficiencyError naming them.
    """
    y = _as_response(design, Y)
    Z_within = within_projection(design.Z, design.student, design.n)
    y_within = within_projection(y, design.student, design.n)
    theta, inverse = _solve_normal(
        design, Z_within.T @ Z_within, Z_within.T @ y_within, "FE", with_student_indicators=True
    )
    s2 = _residual_variance(y_within - Z_within @ theta, design.n_rows - design.n - design.k)
    return EstimateResult(theta, s2 * inverse, "FE", design.column_names)


def gamma(vc: ScalarVarianceComponents, T: int) -> Tuple[float, float]:
    """Quasi-demeaning weight gamma = rho / (1 + rho (T - 1)) and gamma * T."""
    if T < 1:
        raise PanelValueError(f"T must be at least 1, got {T}")
    rho = vc.rho
    g = rho / (1.0 + rho * (T - 1))
    return g, g * T


def re_quasi_demeaned(
    design: PanelDesign,
    Y,
    vc: ScalarVarianceComponents,
    gamma_t: Optional[float] = None,
) -> EstimateResult:
    """
    Random-effects estimator in quasi-demeaned form,
    theta = (Z'(I - gT H_D) Z)^-1 Z'(I - gT H_D) Y.

    `gamma_t` overrides the weight implied by `vc` (gT = 0 gives OLS, gT = 1 gives FE).
    Balanced panels only; unbalanced data goes through gls_known_R.
    """
    if not design.is_balanced:
        raise PanelValueError("re_quasi_demeaned needs a balanced panel; use gls_known_R for unbalanced data")
    y = _as_response(design, Y)
    if gamma_t is None:
        _, gamma_t = gamma(vc, design.T)

    Z = design.Z
    z_means = Z - within_projection(Z, design.student, design.n)
    y_means = y - within_projection(y, design.student, design.n)
    Z_quasi = Z - gamma_t * z_means
    y_quasi = y - gamma_t * y_means

    theta, inverse = _solve_normal(design, Z.T @ Z_quasi, Z.T @ y_quasi, "RE-quasi")
    return EstimateResult(theta, vc.sigma2 * inverse, "RE-quasi", design.column_names)


def _check_mask(design: PanelDesign, mask: Optional[ObservationMask]) -> None:
    if mask is None:
        return
    implied = ObservationMask.from_design(design).present
    if mask.present.shape != implied.shape or not np.array_equal(mask.present, implied):
        raise PanelValueError("Observation mask does not match the design's observed rows")


def gls_known_R(
    design: PanelDesign,
    Y,
    cov: BlockCovariance,
    mask: Optional[ObservationMask] = None,
    estimator: str = "GLS-known",
) -> EstimateResult:
    """
    theta = (Z'R^-1 Z)^-1 Z'R^-1 Y with R = I_n (x) R1.

    Z'R^-1 Z and Z'R^-1 Y are accumulated per student block; the nT x nT matrix R is
    never formed. Unbalanced designs use subset inverses, cached by observation pattern.
    """
    y = _as_response(design, Y)
    if cov.T != design.T:
        raise PanelValueError(f"Covariance is {cov.T} x {cov.T} but the design has T = {design.T}")
    _check_mask(design, mask)
    k = design.k

    if design.is_balanced:
        Z_blocks = design.balanced_blocks(design.Z)
        y_blocks = design.balanced_blocks(y)
        weighted = np.matmul(cov.R_inv, Z_blocks).reshape(-1, k)
        gram = Z_blocks.reshape(-1, k).T @ weighted
        rhs = weighted.T @ y_blocks.reshape(-1)
    else:
        gram = np.zeros((k, k))
        rhs = np.zeros(k)
        inverses: Dict[Tuple[int, ...], np.ndarray] = {}
        for rows in design.student_rows():
            pattern = tuple(int(t) for t in design.time[rows])
            if pattern not in inverses:
                present = np.zeros(design.T, dtype=bool)
                present[list(pattern)] = True
                inverses[pattern] = subset_block(cov, present).R_inv
            Z_i = design.Z[rows]
            W_i = inverses[pattern] @ Z_i
            gram += Z_i.T @ W_i
            rhs += W_i.T @ y[rows]
        logging.debug("GLS used %d distinct observation patterns", len(inverses))

    theta, inverse = _solve_normal(design, gram, rhs, estimator)
    return EstimateResult(theta, inverse, estimator, design.column_names)


def _ridge_if_needed(R_hat: np.ndarray) -> np.ndarray:
    R_hat = 0.5 * (R_hat + R_hat.T)
    if scipy.linalg.eigvalsh(R_hat)[0] >= PD_FLOOR:
        return R_hat
    T = R_hat.shape[0]
    ridge = max(RIDGE_SCALE * float(np.trace(R_hat)) / T, RIDGE_FLOOR)
    logging.debug("Adding ridge %.3g to the residual covariance", ridge)
    return R_hat + ridge * np.eye(T)


def estimate_R_mom(design: PanelDesign, Y, max_iter: int = 50, tol: float = 1e-6) -> np.ndarray:
    """
    Iterated method-of-moments estimate of the per-student covariance R1.

    Starts from OLS residuals, sets R1 = (1/n) sum e_i e_i', refits by GLS and repeats
    until the largest element change falls below `tol` or `max_iter` is reached.
    A ridge of 1e-8 * trace / T is added when the moment matrix is not PD.
    """
    if not design.is_balanced:
        raise PanelValueError("estimate_R_mom needs a balanced panel")
    if design.n <= design.T:
        raise PanelValueError(f"Insufficient students: n = {design.n} must exceed T = {design.T}")
    y = _as_response(design, Y)

    theta = ols(design, y).theta
    previous = None
    R_hat = np.zeros((design.T, design.T))
    for iteration in range(1, max_iter + 1):
        resid = design.balanced_blocks(y - design.Z @ theta)
        R_hat = _ridge_if_needed(resid.T @ resid / design.n)
        if previous is not None and np.max(np.abs(R_hat - previous)) < tol:
            logging.debug("Moment covariance converged after %d iterations", iteration)
            break
        theta = gls_known_R(design, y, covariance_from_matrix(R_hat)).theta
        previous = R_hat
    else:
        logging.warning("⚠️ Moment covariance did not converge in %d iterations", max_iter)
    return R_hat


def feasible_gls(design: PanelDesign, Y, max_iter: int = 50, tol: float = 1e-6) -> EstimateResult:
    R_hat = estimate_R_mom(design, Y, max_iter=max_iter, tol=tol)
    result = gls_known_R(design, Y, covariance_from_matrix(R_hat), estimator="GLS-feasible")
    return replace(result, r_hat=R_hat)


def class_means(scores: pd.DataFrame, n_classes: Optional[int] = None) -> pd.DataFrame:
    """
    Unadjusted classroom means.

    Args:
        scores: long table with columns grade, subject, class, y.
        n_classes: when given, every grade x subject must have classes 0..n_classes-1.

    Returns:
        pd.DataFrame: columns grade, subject, class, estimate, count.
    """
    required = {"grade", "subject", "class", "y"}
    missing = required - set(scores.columns)
    if missing:
        raise PanelValueError(f"Scores table is missing columns: {sorted(missing)}")
    if scores.empty:
        raise PanelValueError("No scores to average")

    means = (
        scores.groupby(["grade", "subject", "class"], sort=True)["y"]
        .agg(estimate="mean", count="size")
        .reset_index()
    )
    if n_classes is not None:
        per_cell = means.groupby(["grade", "subject"])["class"].nunique()
        short = per_cell[per_cell < n_classes]
        if not short.empty:
            cells = [f"grade {g} subject {s}" for g, s in short.index]
            raise PanelValueError(f"Empty classes in: {', '.join(cells)}")
    return means
