"""
Module: diagnostics.py

Numerical checks of the bias-compression argument for GLS under factor heterogeneity:

- the compression matrix R1^-1 A1 and how fast its elements vanish as T grows
- the eigenvalue and root conditions on A1' Psi1^-1 A1 and Psi1^-1/2
- predicted GLS bias for a supplied conditional mean E(delta | Z)
- the row-sum sufficient condition on (Z'R^-1 Z)^-1 Z'
- the eigenvalue sandwich used to relate A'Psi^-1 A to X'X

Heterogeneity families map T to a HeterogeneityModel and feed theorem_condition_profile.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.special

from utils.errors import NotPositiveDefiniteError, PanelValueError
from utils.estimators import gamma, gls_known_R
from utils.panel_core import (
    PD_FLOOR,
    BlockCovariance,
    HeterogeneityModel,
    PanelDesign,
    ScalarVarianceComponents,
    assemble_block_covariance,
    standard_model,
    symmetric_root,
    validate_heterogeneity,
    within_projection,
)
from utils.simgen import example1_loadings, example2_loadings, substream

Family = Callable[[int], HeterogeneityModel]


# --- Domain types ---


@dataclass(frozen=True, eq=False)
class SelectionSpec:
    """
    Conditional mean E(delta_i | Z_i) for every student.

    `cond_mean` is either an (n x d) array (a flat n*d vector is accepted) or a rule
    mapping the design to such an array.
    """

    cond_mean: Union[np.ndarray, Callable[[PanelDesign], np.ndarray]]

    def resolve(self, design: PanelDesign, d: int) -> np.ndarray:
        values = self.cond_mean(design) if callable(self.cond_mean) else self.cond_mean
        values = np.asarray(values, dtype=float)
        if values.size != design.n * d:
            raise PanelValueError(
                f"Conditional mean has {values.size} entries, expected n * d = {design.n} * {d}"
            )
        return values.reshape(design.n, d)


def logit_selection_spec(
    treated: np.ndarray,
    weights: Sequence[float],
    S: Optional[np.ndarray] = None,
    nodes: int = 80,
) -> SelectionSpec:
    """
    Exact E(delta_i | Z) when delta_i ~ N(0, S) and each entry of treated[i] is an
    independent draw with log odds weights' delta_i.

    The draws depend on delta only through s = w'delta, so E(delta | draws) =
    S w E(s | draws) / (w'S w); E(s | draws) is a Gauss-Hermite quadrature.

    Args:
        treated: (n,) or (n x m) boolean treatment draws.
        weights: log-odds coefficients, one per factor.
        S: factor covariance (identity when omitted).
    """
    treated = np.asarray(treated, dtype=bool)
    if treated.ndim == 1:
        treated = treated[:, None]
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    S = np.eye(w.size) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape != (w.size, w.size):
        raise PanelValueError(f"S must be {w.size} x {w.size} to match the log-odds weights")

    Sw = S @ w
    v = float(w @ Sw)
    if v <= 0:
        return SelectionSpec(np.zeros((treated.shape[0], w.size)))

    x, omega = np.polynomial.hermite_e.hermegauss(nodes)
    s = np.sqrt(v) * x
    k = treated.sum(axis=1)[:, None]
    m = treated.shape[1]
    log_lik = k * scipy.special.log_expit(s)[None, :] + (m - k) * scipy.special.log_expit(-s)[None, :]
    log_lik += np.log(omega)[None, :]
    post = np.exp(log_lik - log_lik.max(axis=1, keepdims=True))
    s_mean = (post @ s) / post.sum(axis=1)
    return SelectionSpec(np.outer(s_mean, Sw / v))


@dataclass(frozen=True, eq=False)
class TheoremProfile:
    t_grid: Tuple[int, ...]
    lambda_min: np.ndarray
    row_sum_max: np.ndarray
    compression_max: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "T": list(self.t_grid),
            "lambda_min": self.lambda_min,
            "row_sum_max": self.row_sum_max,
            "compression_max": self.compression_max,
        })


@dataclass(frozen=True, eq=False)
class DirichletReport:
    omega: np.ndarray
    T: int
    sigma2: float
    sample_moment: np.ndarray
    mc_oracle: np.ndarray
    exact_moment: np.ndarray
    printed_limit: np.ndarray
    deviation_oracle: float
    deviation_printed: float
    printed_vs_oracle: float
    lambda_min_scaled: float


@dataclass(frozen=True)
class Lemma1Report:
    lambda_min: float
    omega_min: float
    psi_min: float
    psi_max: float
    lower_bound_holds: bool
    upper_bound_holds: bool

    @property
    def holds(self) -> bool:
        return self.lower_bound_holds and self.upper_bound_holds


# --- Heterogeneity families ---


def standard_family(nu2: float = 1.0, sigma2: float = 1.0) -> Family:
    return lambda T: standard_model(T, nu2, sigma2)


def example1_family() -> Family:
    """One factor with loadings evenly spaced 0.7 to 0.9 and unit score variance."""
    def build(T: int) -> HeterogeneityModel:
        a = example1_loadings(T)
        return HeterogeneityModel(A=a.reshape(-1, 1), S=np.ones((1, 1)), Psi=np.diag(1.0 - a ** 2))
    return build


def ramp_family(sigma2: float = 1.0) -> Family:
    """Two factors; row t is ((T-1-t), t) / (T-1), shifting all weight from the first to the second."""
    def build(T: int) -> HeterogeneityModel:
        if T < 2:
            raise PanelValueError("The ramp family needs T >= 2")
        t = np.arange(T)
        A = np.column_stack([T - 1 - t, t]) / (T - 1)
        return HeterogeneityModel(A=A, S=np.eye(2), Psi=sigma2 * np.eye(T))
    return build


def example2_family(corr: float = 0.5, resid_var: float = 0.2) -> Family:
    def build(T: int) -> HeterogeneityModel:
        S = np.array([[1.0, corr], [corr, 1.0]])
        return HeterogeneityModel(A=example2_loadings(T), S=S, Psi=resid_var * np.eye(T))
    return build


def linear_growth_family(sigma2: float = 1.0) -> Family:
    """Random linear growth: columns (1, ..., 1) and (1, 2, ..., T)."""
    def build(T: int) -> HeterogeneityModel:
        A = np.column_stack([np.ones(T), np.arange(1, T + 1)])
        return HeterogeneityModel(A=A, S=np.eye(2), Psi=sigma2 * np.eye(T))
    return build


def dirichlet_family(omega: Sequence[float], sigma2: float = 1.0, seed: int = 0) -> Family:
    omega = np.asarray(omega, dtype=float)

    def build(T: int) -> HeterogeneityModel:
        rng = substream((seed, T))
        return HeterogeneityModel(A=_dirichlet_rows(rng, omega, T), S=np.eye(omega.size), Psi=sigma2 * np.eye(T))
    return build


FAMILIES: Dict[str, Callable[[], Family]] = {
    "standard": standard_family,
    "example1": example1_family,
    "ramp": lambda: ramp_family(0.2),
    "example2": example2_family,
    "linear_growth": linear_growth_family,
    "dirichlet": lambda: dirichlet_family((1.0, 2.0, 3.0)),
}


def _dirichlet_rows(rng: np.random.Generator, omega: np.ndarray, size: int) -> np.ndarray:
    if np.any(omega <= 0):
        raise PanelValueError("Dirichlet parameters must be positive")
    if omega.size == 1:
        return np.ones((size, 1))
    return rng.dirichlet(omega, size=size)


# --- Operations ---


def bias_compression_matrix(h: HeterogeneityModel, method: str = "factorized") -> Tuple[np.ndarray, float]:
    """
    R1^-1 A1 and its largest absolute element.

    "factorized" uses Psi^-1/2 U diag(sqrt(lam) / (1 + lam)) V' S^-1/2 from the SVD of
    X = Psi^-1/2 A S^1/2; "direct" multiplies the assembled inverse by A1.
    """
    cov = assemble_block_covariance(h)
    if method == "factorized":
        matrix = cov.factors.inverse_times_loadings()
    elif method == "direct":
        matrix = cov.R_inv @ h.A
    else:
        raise PanelValueError(f"Unknown method '{method}'")
    return matrix, float(np.max(np.abs(matrix))) if matrix.size else 0.0


def theorem_condition_profile(family: Family, t_grid: Sequence[int]) -> TheoremProfile:
    """Smallest eigenvalue of A1'Psi1^-1 A1, max row abs-sum of Psi1^-1/2 and compression per T."""
    lambda_min, row_sum_max, compression_max = [], [], []
    for T in t_grid:
        h = family(int(T))
        validate_heterogeneity(h)
        psi_inv_half = symmetric_root(h.Psi, "Psi", power=-0.5)
        B = psi_inv_half @ h.A
        lambda_min.append(float(scipy.linalg.eigvalsh(B.T @ B)[0]))
        row_sum_max.append(float(np.max(np.abs(psi_inv_half).sum(axis=1))))
        compression_max.append(bias_compression_matrix(h)[1])
        logging.debug("T=%s lambda_min=%.4g compression=%.4g", T, lambda_min[-1], compression_max[-1])
    return TheoremProfile(
        t_grid=tuple(int(T) for T in t_grid),
        lambda_min=np.array(lambda_min),
        row_sum_max=np.array(row_sum_max),
        compression_max=np.array(compression_max),
    )


def dirichlet_limit_check(
    omega: Sequence[float],
    T: int,
    sigma2: float,
    seed: int,
    n_mc: int = 1_000_000,
) -> DirichletReport:
    """
    Compare (1/T) A'Psi^-1 A for T Dirichlet(omega) rows with a Monte Carlo estimate of
    (1/sigma2) E[xx'] and with the closed-form limit (1/sigma2)(Omega + c omega omega').
    Both deviations are reported; neither is asserted.
    """
    omega = np.asarray(omega, dtype=float).ravel()
    if np.any(omega <= 0):
        raise PanelValueError("Dirichlet parameters must be positive")
    rows_rng = substream((seed, 0))
    oracle_rng = substream((seed, 1))

    A = _dirichlet_rows(rows_rng, omega, T)
    sample_moment = A.T @ A / (T * sigma2)
    draws = _dirichlet_rows(oracle_rng, omega, n_mc)
    mc_oracle = draws.T @ draws / (n_mc * sigma2)

    w0 = omega.sum()
    exact_moment = (np.diag(omega) + np.outer(omega, omega)) / (w0 * (w0 + 1.0) * sigma2)
    Omega = np.diag(w0 * omega / (w0 ** 2 * (w0 + 1.0)))
    c = (w0 * (w0 + 1.0) - 1.0) / (w0 ** 2 * (w0 + 1.0))
    printed_limit = (Omega + c * np.outer(omega, omega)) / sigma2

    printed_vs_oracle = float(np.max(np.abs(printed_limit - mc_oracle)))
    if printed_vs_oracle > 0.01:
        logging.info("⚠️ Closed-form Dirichlet limit differs from the moment oracle by %.4f", printed_vs_oracle)
    return DirichletReport(
        omega=omega,
        T=T,
        sigma2=sigma2,
        sample_moment=sample_moment,
        mc_oracle=mc_oracle,
        exact_moment=exact_moment,
        printed_limit=printed_limit,
        deviation_oracle=float(np.max(np.abs(sample_moment - mc_oracle))),
        deviation_printed=float(np.max(np.abs(sample_moment - printed_limit))),
        printed_vs_oracle=printed_vs_oracle,
        lambda_min_scaled=float(scipy.linalg.eigvalsh(sample_moment)[0]),
    )


def expected_gls_bias(
    design: PanelDesign,
    model: Union[HeterogeneityModel, ScalarVarianceComponents],
    sel: SelectionSpec,
    cov: Optional[BlockCovariance] = None,
) -> np.ndarray:
    """
    Predicted bias E(theta_hat | Z) - theta of the GLS estimator.

    For a HeterogeneityModel: (Z'R^-1 Z)^-1 Z'R^-1 A E(delta | Z), with R taken from the
    model unless `cov` overrides it. For ScalarVarianceComponents the standard-model form
    (1 - gT) (Z'(I - gT H_D) Z)^-1 Z'D E(delta | Z) is used (balanced designs).
    """
    if isinstance(model, ScalarVarianceComponents):
        if not design.is_balanced:
            raise PanelValueError("The scalar-variance bias formula needs a balanced panel")
        m = sel.resolve(design, 1)[:, 0]
        _, gamma_t = gamma(model, design.T)
        Z = design.Z
        Z_quasi = Z - gamma_t * (Z - within_projection(Z, design.student, design.n))
        gram = 0.5 * (Z.T @ Z_quasi + Z_quasi.T @ Z)
        return (1.0 - gamma_t) * scipy.linalg.solve(gram, Z.T @ m[design.student], assume_a="pos")

    if model.T != design.T:
        raise PanelValueError(f"Model has T = {model.T} but the design has T = {design.T}")
    m = sel.resolve(design, model.d)
    shifted = np.sum(model.A[design.time] * m[design.student], axis=1)
    cov = cov if cov is not None else assemble_block_covariance(model)
    return gls_known_R(design, shifted, cov).theta


def rowsum_condition(
    design: PanelDesign,
    cov: BlockCovariance,
    rows: Optional[Sequence[Union[int, str]]] = None,
) -> float:
    """
    Largest abs-sum over the rows of (Z'R^-1 Z)^-1 Z', each row summed across all
    observations. `rows` restricts the maximum to selected coefficients (index or name).

    Rows are summed over all nT observations, not divided by nT: for Z = 1 and R = I every
    entry is 1/(nT) and the result is 1. Multiply by 1/(nT) for the per-observation average.
    """
    result = gls_known_R(design, np.zeros(design.n_rows), cov)
    sums = np.abs(result.param_cov @ design.Z.T).sum(axis=1)
    if rows is None:
        return float(sums.max())
    index = [design.column_names.index(r) if isinstance(r, str) else int(r) for r in rows]
    return float(sums[index].max())


def lemma1_check(B: np.ndarray, M: np.ndarray, tol: float = 1e-9) -> Lemma1Report:
    """
    Eigenvalue sandwich between M and B^1/2 M B^1/2 for PD B and symmetric M:
    omega >= psi_min * lambda and lambda >= omega / psi_max.

    Both bounds are guaranteed for PSD M. Any symmetric M is accepted; an indefinite M
    can report a failed bound instead of raising.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if B.shape != M.shape or B.shape[0] != B.shape[1]:
        raise PanelValueError(f"B and M must be square and conformable, got {B.shape} and {M.shape}")
    if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, float(np.max(np.abs(M)))):
        raise PanelValueError("M must be symmetric")

    psi = scipy.linalg.eigvalsh(0.5 * (B + B.T))
    if psi[0] < PD_FLOOR:
        raise NotPositiveDefiniteError("B", float(psi[0]))
    B_half = symmetric_root(B, "B")
    lam = float(scipy.linalg.eigvalsh(M)[0])
    Q = B_half @ M @ B_half
    omega = float(scipy.linalg.eigvalsh(0.5 * (Q + Q.T))[0])
    psi_min, psi_max = float(psi[0]), float(psi[-1])

    scale = max(1.0, abs(omega), abs(psi_min * lam), abs(lam))
    return Lemma1Report(
        lambda_min=lam,
        omega_min=omega,
        psi_min=psi_min,
        psi_max=psi_max,
        lower_bound_holds=omega >= psi_min * lam - tol * scale,
        upper_bound_holds=lam >= omega / psi_max - tol * scale,
    )


def lemma1_property_sweep(n_pairs: int = 1000, max_dim: int = 6, seed: int = 0) -> pd.DataFrame:
    """Run lemma1_check on random PD B and PSD M of dimension 1..max_dim; one row per pair."""
    rng = substream((seed, 1))
    records = []
    for _ in range(n_pairs):
        d = int(rng.integers(1, max_dim + 1))
        G = rng.standard_normal((d, d))
        B = G @ G.T + 0.1 * np.eye(d)
        H = rng.standard_normal((d, int(rng.integers(1, d + 1))))
        report = lemma1_check(B, H @ H.T)
        records.append({
            "d": d,
            "lambda_min": report.lambda_min,
            "omega_min": report.omega_min,
            "lower_bound_holds": report.lower_bound_holds,
            "upper_bound_holds": report.upper_bound_holds,
        })
    return pd.DataFrame(records)
