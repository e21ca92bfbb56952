"""
Module: simgen.py

Seeded generators for the three Monte Carlo designs and the teacher-persistence
design builder.

Every generator is a pure function of its config. Seeds are SeedSequence entropy
(an int or a tuple of ints, e.g. (base_seed, grid_index, rep)); each generator spawns
independent Philox streams for latent factors, noise and assignment, so a replication
draws the same numbers no matter which worker runs it.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.special

from env_config import sim_config
from utils.errors import PanelValueError
from utils.panel_core import HeterogeneityModel, ObservationMask, PanelDesign

SeedLike = Union[int, Tuple[int, ...]]


def substream(seed: SeedLike) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _streams(seed: SeedLike, count: int):
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def example1_loadings(T: int) -> np.ndarray:
    low, high = sim_config("ex1_loading_range")
    return np.linspace(low, high, T)


def example2_loadings(T: int) -> np.ndarray:
    low, high = sim_config("ex2_loading_range")
    return np.column_stack([np.linspace(low, high, T), np.linspace(high, low, T)])


def _period_indicators(n: int, T: int) -> np.ndarray:
    return np.tile(np.eye(T), (n, 1))


def _balanced_index(n: int, T: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.repeat(np.arange(n), T), np.tile(np.arange(T), n)


# --- Configs ---


@dataclass(frozen=True)
class Example1Config:
    scenario: int
    T: int
    n: int = field(default_factory=lambda: sim_config("n_students"))
    seed: SeedLike = 0
    loadings: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise PanelValueError(f"Example 1 scenario must be 1-4, got {self.scenario}")
        if self.T < 1 or self.n < 1:
            raise PanelValueError("T and n must be positive")
        a = self.resolved_loadings()
        if a.shape != (self.T,) or np.any(a <= 0) or np.any(a >= 1):
            raise PanelValueError("Loadings must be T values strictly inside (0, 1)")

    def resolved_loadings(self) -> np.ndarray:
        if self.loadings is None:
            return example1_loadings(self.T)
        return np.asarray(self.loadings, dtype=float)


@dataclass(frozen=True)
class Example2Config:
    scenario: int
    T: int
    n: int = field(default_factory=lambda: sim_config("n_students"))
    seed: SeedLike = 0
    factor_corr: float = field(default_factory=lambda: sim_config("ex2_factor_corr"))
    resid_var: float = field(default_factory=lambda: sim_config("ex2_resid_var"))

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise PanelValueError(f"Example 2 scenario must be 1-3, got {self.scenario}")
        if self.T < 1 or self.n < 1:
            raise PanelValueError("T and n must be positive")
        if not abs(self.factor_corr) < 1:
            raise PanelValueError(f"Factor correlation must lie in (-1, 1), got {self.factor_corr}")
        if self.resid_var <= 0:
            raise PanelValueError(f"Residual variance must be positive, got {self.resid_var}")


@dataclass(frozen=True)
class TeacherSimConfig:
    n: int = field(default_factory=lambda: sim_config("n_students"))
    class_size: int = field(default_factory=lambda: sim_config("ex3_class_size"))
    G: int = field(default_factory=lambda: sim_config("ex3_grades"))
    S: int = 1
    alpha: float = 0.0
    sigma_delta2: float = field(default_factory=lambda: sim_config("ex3_sigma_delta2"))
    sigma_lambda2: float = field(default_factory=lambda: sim_config("ex3_sigma_lambda2"))
    r: float = field(default_factory=lambda: sim_config("ex3_r"))
    nu_delta2: float = field(default_factory=lambda: sim_config("ex3_nu_delta2"))
    nu_lambda2: float = field(default_factory=lambda: sim_config("ex3_nu_lambda2"))
    sigma_eps2: float = field(default_factory=lambda: sim_config("ex3_sigma_eps2"))
    selection_weights: Tuple[float, float, float] = field(
        default_factory=lambda: tuple(sim_config("ex3_selection_weights"))
    )
    seed: SeedLike = 0

    def __post_init__(self):
        if self.class_size < 1 or self.n % self.class_size:
            raise PanelValueError(f"n = {self.n} is not divisible by class size {self.class_size}")
        if self.G < 2:
            raise PanelValueError("At least two grades are needed to separate intercepts from growth")
        if self.S < 1:
            raise PanelValueError(f"Number of subjects must be positive, got {self.S}")
        if not 0.0 <= self.alpha <= 1.0:
            raise PanelValueError(f"Persistence alpha must lie in [0, 1], got {self.alpha}")
        if not abs(self.r) < 1:
            raise PanelValueError(f"Intercept/slope correlation must lie in (-1, 1), got {self.r}")
        if np.any(grade_marginal_variances(self) <= 0):
            raise PanelValueError("Marginal score variance must be positive in every grade")

    @property
    def n_classes(self) -> int:
        return self.n // self.class_size

    @property
    def T(self) -> int:
        return self.G * self.S


def grade_marginal_variances(cfg: TeacherSimConfig) -> np.ndarray:
    """Analytic score variance per grade g = 0..G-1."""
    g = np.arange(cfg.G, dtype=float)
    cross = cfg.r * np.sqrt(cfg.sigma_delta2 * cfg.sigma_lambda2)
    return (
        (cfg.sigma_delta2 + cfg.nu_delta2)
        + g ** 2 * (cfg.sigma_lambda2 + cfg.nu_lambda2)
        + 2.0 * g * cross
        + cfg.sigma_eps2
    )


# --- Dataset ---


@dataclass(frozen=True, eq=False)
class GeneratedDataset:
    """
    One simulated panel. `latent` holds the per-student factors (n x d) in the
    parametrization of `truth`; `treatment_columns` index the coefficients that the
    bias metric averages over.
    """

    y: np.ndarray
    design: PanelDesign
    true_theta: np.ndarray
    latent: np.ndarray
    assignments: pd.DataFrame
    truth: HeterogeneityModel
    subject: np.ndarray
    treatment_columns: Tuple[int, ...]
    label: str = ""

    def scores_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "student": self.design.student,
            "t": self.design.time + 1,
            "subject": self.subject + 1,
            "y": self.y,
        })


# --- Generators ---


def gen_example1(cfg: Example1Config) -> GeneratedDataset:
    """One factor with loadings a_t; log odds of treatment equal delta_i."""
    rng_latent, rng_noise, rng_treat = _streams(cfg.seed, 3)
    n, T = cfg.n, cfg.T
    a = cfg.resolved_loadings()

    delta = rng_latent.standard_normal(n)
    eps = rng_noise.standard_normal((n, T)) * np.sqrt(1.0 - a ** 2)
    p_treat = scipy.special.expit(delta)
    if cfg.scenario in (1, 3):
        treated = np.repeat((rng_treat.random(n) < p_treat)[:, None], T, axis=1)
    else:
        treated = rng_treat.random((n, T)) < p_treat[:, None]

    y = (a[None, :] * delta[:, None] + eps).ravel()
    treat = treated.ravel().astype(float)
    student, time = _balanced_index(n, T)

    if cfg.scenario in (1, 2):
        Z = np.column_stack([np.ones(n * T), treat])
        names = ("intercept", "treat")
        treatment_columns: Tuple[int, ...] = (1,)
    else:
        periods = _period_indicators(n, T)
        Z = np.hstack([periods, periods * treat[:, None]])
        names = tuple(f"mean_t{t + 1}" for t in range(T)) + tuple(f"treat_t{t + 1}" for t in range(T))
        treatment_columns = tuple(range(T, 2 * T))

    design = PanelDesign(Z=Z, student=student, time=time, T=T, column_names=names)
    return GeneratedDataset(
        y=y,
        design=design,
        true_theta=np.zeros(design.k),
        latent=delta[:, None],
        assignments=pd.DataFrame({"student": student, "t": time + 1, "treated": treated.ravel()}),
        truth=HeterogeneityModel(A=a[:, None], S=np.ones((1, 1)), Psi=np.diag(1.0 - a ** 2)),
        subject=np.zeros(n * T, dtype=np.int64),
        treatment_columns=treatment_columns,
        label=f"example1 scenario={cfg.scenario} T={T}",
    )


def gen_example2(cfg: Example2Config) -> GeneratedDataset:
    """Two correlated factors whose weights shift across tests; treatment in the final period only."""
    rng_latent, rng_noise, rng_treat = _streams(cfg.seed, 3)
    n, T = cfg.n, cfg.T
    A = example2_loadings(T)
    S = np.array([[1.0, cfg.factor_corr], [cfg.factor_corr, 1.0]])

    delta = rng_latent.standard_normal((n, 2)) @ scipy.linalg.cholesky(S, lower=True).T
    eps = rng_noise.standard_normal((n, T)) * np.sqrt(cfg.resid_var)
    weight = sim_config("ex2_logodds_weight")
    coefs = {1: (weight, weight), 2: (weight, 0.0), 3: (0.0, weight)}[cfg.scenario]
    treated_final = rng_treat.random(n) < scipy.special.expit(delta @ np.array(coefs))

    y = (delta @ A.T + eps).ravel()
    student, time = _balanced_index(n, T)
    treat = np.zeros((n, T))
    treat[:, T - 1] = treated_final
    Z = np.hstack([_period_indicators(n, T), treat.reshape(-1, 1)])
    names = tuple(f"mean_t{t + 1}" for t in range(T)) + ("treat_final",)

    design = PanelDesign(Z=Z, student=student, time=time, T=T, column_names=names)
    return GeneratedDataset(
        y=y,
        design=design,
        true_theta=np.zeros(design.k),
        latent=delta,
        assignments=pd.DataFrame({"student": student, "t": time + 1, "treated": treat.ravel().astype(bool)}),
        truth=HeterogeneityModel(A=A, S=S, Psi=cfg.resid_var * np.eye(T)),
        subject=np.zeros(n * T, dtype=np.int64),
        treatment_columns=(T,),
        label=f"example2 scenario={cfg.scenario} T={T}",
    )


def _assign_classes(eta: np.ndarray, class_size: int) -> np.ndarray:
    """Sort ascending on eta (ties by student id) and fill classes of `class_size` in order."""
    n, G = eta.shape
    classes = np.empty((n, G), dtype=np.int64)
    ids = np.arange(n)
    for g in range(G):
        order = np.lexsort((ids, eta[:, g]))
        classes[order, g] = ids // class_size
    return classes


def gen_teacher_scores(cfg: TeacherSimConfig) -> GeneratedDataset:
    """
    Linear growth in every subject with shared and subject-specific intercepts and slopes:

        Y_isg = delta_i + delta_is + (lambda_i + lambda_is) g + eps_isg,  g = 0..G-1

    Each grade, students are sorted on a noisy index of (delta_i, lambda_i) and filled
    into classes in order. No true teacher effects are generated.
    """
    rng_latent, rng_noise, rng_select = _streams(cfg.seed, 3)
    n, G, S = cfg.n, cfg.G, cfg.S
    sd_delta, sd_lambda = np.sqrt(cfg.sigma_delta2), np.sqrt(cfg.sigma_lambda2)

    shared_cov = np.array([
        [cfg.sigma_delta2, cfg.r * sd_delta * sd_lambda],
        [cfg.r * sd_delta * sd_lambda, cfg.sigma_lambda2],
    ])
    shared = rng_latent.standard_normal((n, 2)) @ scipy.linalg.cholesky(shared_cov, lower=True).T
    intercepts = shared[:, [0]] + np.sqrt(cfg.nu_delta2) * rng_latent.standard_normal((n, S))
    slopes = shared[:, [1]] + np.sqrt(cfg.nu_lambda2) * rng_latent.standard_normal((n, S))

    grades = np.arange(G, dtype=float)
    eps = np.sqrt(cfg.sigma_eps2) * rng_noise.standard_normal((n, G, S))
    y = (intercepts[:, None, :] + slopes[:, None, :] * grades[None, :, None] + eps).reshape(n, G * S)

    w_delta, w_lambda, w_noise = cfg.selection_weights
    xi = rng_select.standard_normal((n, G))
    eta = w_delta * shared[:, [0]] / sd_delta + w_lambda * shared[:, [1]] / sd_lambda + w_noise * xi
    classes = _assign_classes(eta, cfg.class_size)
    assignments = pd.DataFrame({
        "student": np.repeat(np.arange(n), G),
        "grade": np.tile(np.arange(G), n),
        "class": classes.ravel(),
        "eta": eta.ravel(),
    })

    # Minimal-rank truth: factors are the per-subject intercepts and slopes
    eye = np.eye(S)
    A = np.vstack([np.hstack([eye, g * eye]) for g in range(G)])
    cross = cfg.r * sd_delta * sd_lambda
    S_truth = np.block([
        [cfg.sigma_delta2 + cfg.nu_delta2 * eye, np.full((S, S), cross)],
        [np.full((S, S), cross), cfg.sigma_lambda2 + cfg.nu_lambda2 * eye],
    ])

    design = build_persistence_design(assignments, cfg.alpha, G, S, cfg.n_classes)
    logging.debug("Teacher design: %d rows x %d teacher columns", design.n_rows, design.k)
    return GeneratedDataset(
        y=y.ravel(),
        design=design,
        true_theta=np.zeros(design.k),
        latent=np.hstack([intercepts, slopes]),
        assignments=assignments,
        truth=HeterogeneityModel(A=A, S=S_truth, Psi=cfg.sigma_eps2 * np.eye(G * S)),
        subject=np.tile(np.arange(S), n * G),
        treatment_columns=tuple(range(design.k)),
        label=f"example3 S={S} alpha={cfg.alpha}",
    )


def teacher_column(subject: int, grade: int, klass: int, G: int, n_classes: int) -> int:
    """Column of the (grade, class) teacher's effect on `subject` in the persistence design."""
    return (subject * G + grade) * n_classes + klass


def build_persistence_design(
    assignments: pd.DataFrame,
    alpha: float,
    G: int,
    S: int,
    n_classes: Optional[int] = None,
) -> PanelDesign:
    """
    Teacher x subject design where the grade-g1 teacher's effect persists into grade
    g2 >= g1 with weight alpha ** (g2 - g1) (0 ** 0 = 1). A subject-s column touches only
    subject-s scores. No intercept or grade-mean columns.

    Args:
        assignments: columns student, grade (0..G-1), class (0..n_classes-1).
    """
    if not 0.0 <= alpha <= 1.0:
        raise PanelValueError(f"Persistence alpha must lie in [0, 1], got {alpha}")
    table = assignments.pivot(index="student", columns="grade", values="class")
    n = int(assignments["student"].max()) + 1
    if table.shape != (n, G) or table.isna().to_numpy().any() or not np.array_equal(table.index, np.arange(n)):
        raise PanelValueError("Assignments must give every student a class in every grade")
    classes = table.sort_index(axis=1).to_numpy(dtype=np.int64)
    if n_classes is None:
        n_classes = int(classes.max()) + 1

    T = G * S
    k = n_classes * G * S
    Z = np.zeros((n * T, k))
    students = np.arange(n)
    for g2 in range(G):
        for g1 in range(g2 + 1):
            weight = float(alpha) ** (g2 - g1)
            if weight == 0.0:
                continue
            for s in range(S):
                rows = (students * G + g2) * S + s
                cols = teacher_column(s, g1, classes[:, g1], G, n_classes)
                Z[rows, cols] = weight

    names = tuple(
        f"teacher_s{s + 1}_g{g + 1}_c{c + 1}" for s in range(S) for g in range(G) for c in range(n_classes)
    )
    return PanelDesign(
        Z=Z,
        student=np.repeat(students, T),
        time=np.tile(np.arange(T), n),
        T=T,
        column_names=names,
    )


def apply_mar_mask(ds: GeneratedDataset, rate: float, seed: SeedLike) -> Tuple[GeneratedDataset, ObservationMask]:
    """
    Drop each score independently with probability `rate`. A student left with no
    scores has their mask redrawn until at least one remains. Design rows, responses
    and subjects are subset in lockstep.
    """
    if not 0.0 <= rate < 1.0:
        raise PanelValueError(f"Missing rate must lie in [0, 1), got {rate}")
    rng = substream(seed)
    base = ObservationMask.from_design(ds.design).present
    present = base & (rng.random(base.shape) >= rate)
    empty = np.flatnonzero(~present.any(axis=1))
    while empty.size:
        present[empty] = base[empty] & (rng.random((empty.size, base.shape[1])) >= rate)
        empty = empty[~present[empty].any(axis=1)]

    keep = present[ds.design.student, ds.design.time]
    masked = replace(
        ds,
        y=ds.y[keep],
        design=ds.design.subset_rows(keep),
        subject=ds.subject[keep],
        label=f"{ds.label} missing={rate}",
    )
    logging.debug("Masked %.1f%% of scores", 100.0 * (1.0 - keep.mean()))
    return masked, ObservationMask(present)
