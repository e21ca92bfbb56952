"""
Module: panel_core.py

Core data model for stacked longitudinal designs and the structured linear algebra
behind every estimator: block covariance assembly, Woodbury/Schur inversion,
the within-student projection and per-student row subsetting for unbalanced data.

All types are frozen and hold read-only arrays, so they can be shared across worker
processes. Operations are pure functions.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from utils.errors import NotPositiveDefiniteError, PanelValueError


PD_FLOOR = 1e-12  # eigenvalues below this are treated as non-PD
RANK_TOL = 1e-8  # singular values below RANK_TOL * largest count as zero
INVERSE_CHECK_TOL = 1e-8


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# --- Domain types ---


@dataclass(frozen=True, eq=False)
class PanelDesign:
    """
    Stacked regression design for one experiment.

    Rows are score observations. `student` maps each row to a student id in 0..n-1
    and `time` maps it to a measurement index in 0..T-1 (the t = 1..T of the model,
    shifted to zero-based indexing). Every student id in 0..n-1 must own at least one
    row and no (student, time) pair may repeat.
    """

    Z: np.ndarray
    student: np.ndarray
    time: np.ndarray
    T: int
    column_names: Tuple[str, ...] = ()

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        if Z.ndim != 2:
            raise PanelValueError(f"Z must be a 2-D matrix, got shape {Z.shape}")
        student = np.asarray(self.student, dtype=np.int64).ravel()
        time = np.asarray(self.time, dtype=np.int64).ravel()
        n_rows = Z.shape[0]
        if student.shape[0] != n_rows or time.shape[0] != n_rows:
            raise PanelValueError(
                f"student and time maps must have one entry per row ({n_rows}); "
                f"got {student.shape[0]} and {time.shape[0]}"
            )
        if self.T < 1:
            raise PanelValueError(f"T must be at least 1, got {self.T}")
        if n_rows:
            if student.min() < 0:
                raise PanelValueError("Student ids must be non-negative")
            if time.min() < 0 or time.max() >= self.T:
                raise PanelValueError(f"Measurement indices must lie in 0..{self.T - 1}")
            counts = np.bincount(student)
            empty = np.flatnonzero(counts == 0)
            if empty.size:
                raise PanelValueError(f"Students without rows: {empty[:10].tolist()}")
            keys = student * self.T + time
            if np.unique(keys).size != n_rows:
                raise PanelValueError("A (student, time) pair appears more than once")

        names = tuple(self.column_names) or tuple(f"z{j}" for j in range(Z.shape[1]))
        if len(names) != Z.shape[1]:
            raise PanelValueError(f"Expected {Z.shape[1]} column names, got {len(names)}")

        object.__setattr__(self, "Z", _frozen(Z))
        object.__setattr__(self, "student", _frozen(student, np.int64))
        object.__setattr__(self, "time", _frozen(time, np.int64))
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "column_names", names)

    @property
    def n_rows(self) -> int:
        return self.Z.shape[0]

    @property
    def n(self) -> int:
        return int(self.student.max()) + 1 if self.n_rows else 0

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @cached_property
    def canonical_order(self) -> np.ndarray:
        """Row order sorted by student, then time."""
        return np.lexsort((self.time, self.student))

    @cached_property
    def is_balanced(self) -> bool:
        return self.n_rows == self.n * self.T

    def student_rows(self) -> List[np.ndarray]:
        """Row indices of each student, in time order."""
        order = self.canonical_order
        counts = np.bincount(self.student, minlength=self.n)
        return np.split(order, np.cumsum(counts)[:-1])

    def balanced_blocks(self, values: np.ndarray) -> np.ndarray:
        """Reshape row-aligned values to (n, T, ...) in canonical order. Requires a balanced design."""
        if not self.is_balanced:
            raise PanelValueError("Design is unbalanced; per-student blocks have unequal length")
        values = np.asarray(values, dtype=float)
        ordered = values[self.canonical_order]
        return ordered.reshape((self.n, self.T) + values.shape[1:])

    def subset_rows(self, keep: np.ndarray) -> "PanelDesign":
        keep = np.asarray(keep, dtype=bool)
        return PanelDesign(
            Z=self.Z[keep],
            student=self.student[keep],
            time=self.time[keep],
            T=self.T,
            column_names=self.column_names,
        )

    def select_columns(self, columns: Sequence[int]) -> "PanelDesign":
        columns = list(columns)
        return PanelDesign(
            Z=self.Z[:, columns],
            student=self.student,
            time=self.time,
            T=self.T,
            column_names=tuple(self.column_names[j] for j in columns),
        )


@dataclass(frozen=True, eq=False)
class HeterogeneityModel:
    """Per-student factor structure: loadings A (T x d), factor covariance S (d x d), residual covariance Psi (T x T)."""

    A: np.ndarray
    S: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 1:
            A = A.reshape(-1, 1)
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        T, d = A.shape
        if d == 0:
            S = S.reshape(0, 0)
        if S.shape != (d, d):
            raise PanelValueError(f"S must be {d} x {d}, got {S.shape}")
        if Psi.shape != (T, T):
            raise PanelValueError(f"Psi must be {T} x {T}, got {Psi.shape}")
        for name, M in (("S", S), ("Psi", Psi)):
            if not np.all(np.isfinite(M)):
                raise PanelValueError(f"Matrix '{name}' has non-finite entries")
            scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
            if M.size and np.max(np.abs(M - M.T)) > 1e-10 * scale:
                raise PanelValueError(f"Matrix '{name}' is not symmetric")
        if not np.all(np.isfinite(A)):
            raise PanelValueError("Loading matrix 'A' has non-finite entries")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "S", _frozen(S))
        object.__setattr__(self, "Psi", _frozen(Psi))

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def implied_covariance(self) -> np.ndarray:
        R = self.A @ self.S @ self.A.T + self.Psi
        return 0.5 * (R + R.T)

    def subset(self, rows: Sequence[int]) -> "HeterogeneityModel":
        rows = np.asarray(rows, dtype=np.int64)
        return HeterogeneityModel(A=self.A[rows], S=self.S, Psi=self.Psi[np.ix_(rows, rows)])


@dataclass(frozen=True, eq=False)
class _SchurFactors:
    """Intermediates of the Schur-complement inverse: X = Psi^-1/2 A S^1/2 = U diag(sv) V'."""

    psi_inv_half: np.ndarray
    s_inv_half: np.ndarray
    U: np.ndarray
    sv: np.ndarray
    Vt: np.ndarray

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.sv ** 2

    def inverse(self) -> np.ndarray:
        lam = self.eigenvalues
        inner = np.eye(self.U.shape[0]) - (self.U * (lam / (1.0 + lam))) @ self.U.T
        R_inv = self.psi_inv_half @ inner @ self.psi_inv_half
        return 0.5 * (R_inv + R_inv.T)

    def inverse_times_loadings(self) -> np.ndarray:
        lam = self.eigenvalues
        return self.psi_inv_half @ (self.U * (self.sv / (1.0 + lam))) @ self.Vt @ self.s_inv_half


@dataclass(frozen=True, eq=False)
class BlockCovariance:
    """Per-student covariance R1 = A S A' + Psi with its inverse. `observed` lists kept rows for subset views."""

    R: np.ndarray
    R_inv: np.ndarray
    source: HeterogeneityModel
    factors: _SchurFactors = field(repr=False)
    observed: Optional[Tuple[int, ...]] = None

    @property
    def T(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Per-student presence of each of the T scores."""

    present: np.ndarray

    def __post_init__(self):
        present = np.asarray(self.present, dtype=bool)
        if present.ndim != 2:
            raise PanelValueError(f"Mask must be (n x T), got shape {present.shape}")
        empty = np.flatnonzero(~present.any(axis=1))
        if empty.size:
            raise PanelValueError(f"Students with no observed score: {empty[:10].tolist()}")
        object.__setattr__(self, "present", _frozen(present, bool))

    @property
    def n(self) -> int:
        return self.present.shape[0]

    @property
    def T(self) -> int:
        return self.present.shape[1]

    @property
    def observed_fraction(self) -> float:
        return float(self.present.mean())

    @classmethod
    def full(cls, n: int, T: int) -> "ObservationMask":
        return cls(np.ones((n, T), dtype=bool))

    @classmethod
    def from_design(cls, design: PanelDesign) -> "ObservationMask":
        present = np.zeros((design.n, design.T), dtype=bool)
        present[design.student, design.time] = True
        return cls(present)


@dataclass(frozen=True)
class ScalarVarianceComponents:
    """Standard-model components: student-effect variance nu2 and residual variance sigma2."""

    nu2: float
    sigma2: float

    def __post_init__(self):
        if self.nu2 < 0:
            raise PanelValueError(f"nu2 must be non-negative, got {self.nu2}")
        if self.sigma2 <= 0:
            raise PanelValueError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def rho(self) -> float:
        return self.nu2 / (self.nu2 + self.sigma2)

    @classmethod
    def from_rho(cls, rho: float, total: float = 1.0) -> "ScalarVarianceComponents":
        if not 0.0 <= rho < 1.0:
            raise PanelValueError(f"rho must lie in [0, 1), got {rho}")
        return cls(nu2=rho * total, sigma2=(1.0 - rho) * total)

    def to_heterogeneity(self, T: int) -> HeterogeneityModel:
        return standard_model(T, self.nu2, self.sigma2)


def standard_model(T: int, nu2: float, sigma2: float) -> HeterogeneityModel:
    """One student effect loading nu on every score: A = nu * 1, S = [1], Psi = sigma2 * I."""
    return HeterogeneityModel(
        A=np.full((T, 1), np.sqrt(nu2)),
        S=np.ones((1, 1)),
        Psi=sigma2 * np.eye(T),
    )


@dataclass(frozen=True, eq=False)
class RankReport:
    rank: int
    n_columns: int
    singular_values: np.ndarray
    dependent_columns: Tuple[str, ...]
    with_student_indicators: bool

    @property
    def full_rank(self) -> bool:
        return self.rank == self.n_columns


# --- Linear algebra helpers ---


def _symmetric_eigen(M: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    if M.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    evals, evecs = scipy.linalg.eigh(M)
    if evals[0] < PD_FLOOR:
        raise NotPositiveDefiniteError(name, float(evals[0]))
    return evals, evecs


def symmetric_root(M: np.ndarray, name: str, power: float = 0.5) -> np.ndarray:
    """Symmetric matrix power M^power of a PD matrix via eigendecomposition."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    off_diag = M - np.diag(np.diag(M))
    if M.size and not np.any(off_diag):
        diag = np.diag(M)
        if diag.min() < PD_FLOOR:
            raise NotPositiveDefiniteError(name, float(diag.min()))
        return np.diag(diag ** power)
    evals, evecs = _symmetric_eigen(M, name)
    if not evals.size:
        return np.zeros((0, 0))
    root = (evecs * evals ** power) @ evecs.T
    return 0.5 * (root + root.T)


def _schur_factors(h: HeterogeneityModel, psi_name: str = "Psi") -> _SchurFactors:
    psi_inv_half = symmetric_root(h.Psi, psi_name, power=-0.5)
    if h.d == 0:
        T = h.T
        return _SchurFactors(
            psi_inv_half=psi_inv_half,
            s_inv_half=np.zeros((0, 0)),
            U=np.zeros((T, 0)),
            sv=np.zeros(0),
            Vt=np.zeros((0, 0)),
        )
    s_half = symmetric_root(h.S, "S", power=0.5)
    s_inv_half = symmetric_root(h.S, "S", power=-0.5)
    X = psi_inv_half @ h.A @ s_half
    U, sv, Vt = scipy.linalg.svd(X, full_matrices=False)
    return _SchurFactors(psi_inv_half=psi_inv_half, s_inv_half=s_inv_half, U=U, sv=sv, Vt=Vt)


def _assemble(h: HeterogeneityModel, observed: Optional[Tuple[int, ...]] = None, psi_name: str = "Psi") -> BlockCovariance:
    factors = _schur_factors(h, psi_name)
    R = h.implied_covariance()
    R_inv = factors.inverse()
    residual = float(np.max(np.abs(R @ R_inv - np.eye(h.T)))) if h.T else 0.0
    if residual > INVERSE_CHECK_TOL:
        logging.warning("⚠️ Block inverse residual %.2e exceeds %.0e (ill-conditioned R1)", residual, INVERSE_CHECK_TOL)
    return BlockCovariance(R=_frozen(R), R_inv=_frozen(R_inv), source=h, factors=factors, observed=observed)


def validate_heterogeneity(h: HeterogeneityModel) -> None:
    """Raise if S or Psi is not PD or if A does not have full column rank d."""
    symmetric_root(h.Psi, "Psi")
    if h.d:
        symmetric_root(h.S, "S")
        sv = scipy.linalg.svd(h.A, compute_uv=False)
        rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
        if rank != h.d:
            raise PanelValueError(f"Loading matrix A has rank {rank}, expected d = {h.d}")


# --- Operations ---


def assemble_block_covariance(h: HeterogeneityModel) -> BlockCovariance:
    """
    Build R1 = A S A' + Psi and its inverse through the Schur-complement form

        R1^-1 = Psi^-1/2 [I - U diag(lam / (1 + lam)) U'] Psi^-1/2

    where X = Psi^-1/2 A S^1/2 = U diag(sqrt(lam)) V'. R1 itself is never inverted densely.

    Raises:
        NotPositiveDefiniteError: if S or Psi fails the PD floor (names the matrix).
        PanelValueError: if rank(A) != d.
    """
    validate_heterogeneity(h)
    return _assemble(h)


def covariance_from_matrix(R: np.ndarray, name: str = "R_hat") -> BlockCovariance:
    """Wrap an unstructured covariance as the zero-factor model with Psi = R."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    R = 0.5 * (R + R.T)
    h = HeterogeneityModel(A=np.zeros((R.shape[0], 0)), S=np.zeros((0, 0)), Psi=R)
    return _assemble(h, psi_name=name)


def within_projection(values: np.ndarray, student: np.ndarray, n_students: Optional[int] = None) -> np.ndarray:
    """
    Subtract each student's mean from their rows, i.e. apply (I - H_D).

    Args:
        values: (N,) vector or (N, k) matrix, row-aligned with `student`.
        student: (N,) student id per row.
        n_students: when given, every id in 0..n_students-1 must own at least one row.

    Returns:
        np.ndarray: demeaned values with the input's shape.
    """
    arr = np.asarray(values, dtype=float)
    student = np.asarray(student).ravel()
    if arr.shape[0] != student.shape[0]:
        raise PanelValueError(f"values has {arr.shape[0]} rows but student map has {student.shape[0]}")
    if n_students is not None:
        counts = np.bincount(student.astype(np.int64), minlength=n_students)[:n_students]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise PanelValueError(f"Empty student group(s): {empty[:10].tolist()}")
    if arr.shape[0] == 0:
        raise PanelValueError("Cannot project an empty panel")

    frame = pd.DataFrame(arr.reshape(arr.shape[0], -1))
    means = frame.groupby(student).transform("mean").to_numpy()
    return (frame.to_numpy() - means).reshape(arr.shape)


def subset_block(cov: BlockCovariance, present: np.ndarray) -> BlockCovariance:
    """
    Principal submatrix of R1 on one student's observed indices, with its inverse
    recomputed through the Schur form on the kept rows of A and Psi.
    """
    present = np.asarray(present, dtype=bool).ravel()
    if present.shape[0] != cov.T:
        raise PanelValueError(f"Mask length {present.shape[0]} does not match T = {cov.T}")
    if not present.any():
        raise PanelValueError("All-missing student: at least one observed score is required")
    if present.all():
        return cov
    rows = np.flatnonzero(present)
    return _assemble(cov.source.subset(rows), observed=tuple(int(r) for r in rows))


def validate_design(design: PanelDesign, with_student_indicators: bool) -> RankReport:
    """
    Numerical rank of Z, or of [Z | D] net of the n student indicators.

    With indicators the rank is computed on (I - H_D) Z, since rank([Z | D]) = n + rank((I - H_D) Z).
    Dependent columns are the trailing pivots of a column-pivoted QR.
    """
    M = design.Z
    if with_student_indicators and design.k:
        M = within_projection(design.Z, design.student)
    k = design.k
    if k == 0 or M.shape[0] == 0:
        return RankReport(0, k, np.zeros(0), (), with_student_indicators)

    sv = scipy.linalg.svd(M, compute_uv=False)
    top = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > RANK_TOL * top)) if top > 0 else 0

    dependent: Tuple[str, ...] = ()
    if rank < k:
        _, pivots = scipy.linalg.qr(M, mode="r", pivoting=True)
        dependent = tuple(design.column_names[j] for j in sorted(pivots[rank:]))
        logging.info("⚠️ Design rank %d of %d; dependent columns: %s", rank, k, ", ".join(dependent))
    return RankReport(rank, k, _frozen(sv), dependent, with_student_indicators)
