import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.errors import NotPositiveDefiniteError, PanelValueError
from utils.panel_core import (
    HeterogeneityModel,
    ObservationMask,
    PanelDesign,
    ScalarVarianceComponents,
    assemble_block_covariance,
    covariance_from_matrix,
    subset_block,
    symmetric_root,
    validate_design,
    within_projection,
)


def _random_model(rng, T, d):
    G = rng.standard_normal((d, d))
    return HeterogeneityModel(
        A=rng.standard_normal((T, d)),
        S=G @ G.T + np.eye(d),
        Psi=np.diag(rng.uniform(0.2, 2.0, T)),
    )


def test_design_rejects_duplicate_student_time_pair():
    with pytest.raises(PanelValueError, match="more than once"):
        PanelDesign(Z=np.ones((3, 1)), student=[0, 0, 1], time=[0, 0, 0], T=2)


def test_design_rejects_student_without_rows():
    with pytest.raises(PanelValueError, match="Students without rows"):
        PanelDesign(Z=np.ones((2, 1)), student=[0, 2], time=[0, 0], T=1)


def test_design_rejects_time_out_of_range():
    with pytest.raises(PanelValueError):
        PanelDesign(Z=np.ones((2, 1)), student=[0, 1], time=[0, 3], T=2)


def test_design_arrays_are_read_only(balanced_design):
    with pytest.raises(ValueError):
        balanced_design.Z[0, 0] = 5.0


def test_balanced_blocks_follow_canonical_order():
    Z = np.arange(6, dtype=float).reshape(-1, 1)
    design = PanelDesign(Z=Z, student=[1, 0, 1, 0, 1, 0], time=[2, 2, 1, 1, 0, 0], T=3)
    assert design.is_balanced
    blocks = design.balanced_blocks(Z)
    assert blocks.shape == (2, 3, 1)
    assert_allclose(blocks[0, :, 0], [5.0, 3.0, 1.0])
    assert_allclose(blocks[1, :, 0], [4.0, 2.0, 0.0])


def test_unbalanced_design_refuses_blocks():
    design = PanelDesign(Z=np.ones((3, 1)), student=[0, 0, 1], time=[0, 1, 1], T=2)
    assert not design.is_balanced
    with pytest.raises(PanelValueError, match="unbalanced"):
        design.balanced_blocks(np.ones(3))
    assert [rows.tolist() for rows in design.student_rows()] == [[0, 1], [2]]


def test_model_shape_and_symmetry_checks():
    with pytest.raises(PanelValueError, match="Psi must be"):
        HeterogeneityModel(A=np.ones((3, 1)), S=np.eye(1), Psi=np.eye(2))
    with pytest.raises(PanelValueError, match="not symmetric"):
        HeterogeneityModel(A=np.ones((2, 1)), S=np.eye(1), Psi=np.array([[1.0, 0.5], [0.0, 1.0]]))


@pytest.mark.parametrize("T,d", [(1, 1), (3, 1), (5, 2), (8, 3), (12, 4)])
def test_block_inverse_matches_dense_inverse(rng, T, d):
    h = _random_model(rng, T, d)
    cov = assemble_block_covariance(h)
    R = h.A @ h.S @ h.A.T + h.Psi
    assert_allclose(cov.R, R, atol=1e-12)
    assert_allclose(cov.R_inv, np.linalg.inv(R), rtol=1e-8, atol=1e-10)
    assert_allclose(cov.factors.inverse_times_loadings(), np.linalg.solve(R, h.A), atol=1e-10)


def test_block_inverse_with_correlated_residuals(rng):
    T = 6
    G = rng.standard_normal((T, T))
    h = HeterogeneityModel(A=rng.standard_normal((T, 2)), S=np.eye(2), Psi=G @ G.T + np.eye(T))
    cov = assemble_block_covariance(h)
    assert_allclose(cov.R @ cov.R_inv, np.eye(T), atol=1e-9)


def test_not_positive_definite_names_matrix():
    h = HeterogeneityModel(A=np.ones((2, 1)), S=np.eye(1), Psi=np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefiniteError) as err:
        assemble_block_covariance(h)
    assert err.value.matrix_name == "Psi"
    assert err.value.min_eigenvalue == pytest.approx(-1.0)

    h = HeterogeneityModel(A=np.eye(2), S=np.array([[1.0, 2.0], [2.0, 1.0]]), Psi=np.eye(2))
    with pytest.raises(NotPositiveDefiniteError) as err:
        assemble_block_covariance(h)
    assert err.value.matrix_name == "S"


def test_rank_deficient_loadings_rejected():
    A = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(PanelValueError, match="rank 1"):
        assemble_block_covariance(HeterogeneityModel(A=A, S=np.eye(2), Psi=np.eye(3)))


def test_standard_model_implies_compound_symmetry(standard_h):
    R = standard_h.implied_covariance()
    assert_allclose(R, 0.7 * np.ones((4, 4)) + 0.3 * np.eye(4))


def test_covariance_from_matrix_inverts_unstructured_R(rng):
    G = rng.standard_normal((5, 5))
    R = G @ G.T + 0.5 * np.eye(5)
    cov = covariance_from_matrix(R)
    assert cov.source.d == 0
    assert_allclose(cov.R_inv, np.linalg.inv(R), rtol=1e-8, atol=1e-10)


def test_covariance_from_matrix_names_failing_matrix():
    with pytest.raises(NotPositiveDefiniteError) as err:
        covariance_from_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert err.value.matrix_name == "R_hat"


def test_symmetric_root_powers(rng):
    G = rng.standard_normal((4, 4))
    M = G @ G.T + np.eye(4)
    half = symmetric_root(M, "M")
    inv_half = symmetric_root(M, "M", power=-0.5)
    assert_allclose(half @ half, M, atol=1e-10)
    assert_allclose(inv_half @ M @ inv_half, np.eye(4), atol=1e-10)


def test_within_projection_removes_student_means():
    values = np.array([[1.0, 2.0], [3.0, 6.0], [10.0, 0.0]])
    projected = within_projection(values, np.array([0, 0, 1]))
    assert_allclose(projected, [[-1.0, -2.0], [1.0, 2.0], [0.0, 0.0]])


def test_within_projection_is_idempotent(balanced_design):
    once = within_projection(balanced_design.Z, balanced_design.student)
    twice = within_projection(once, balanced_design.student)
    assert_allclose(once, twice, atol=1e-12)
    assert_allclose(once[:, 0], 0.0, atol=1e-12)


def test_within_projection_rejects_empty_group():
    with pytest.raises(PanelValueError, match="Empty student group"):
        within_projection(np.ones(2), np.array([0, 2]), n_students=3)


def test_subset_block_matches_submatrix_inverse(rng):
    h = _random_model(rng, 6, 2)
    cov = assemble_block_covariance(h)
    present = np.array([True, False, True, True, False, True])
    sub = subset_block(cov, present)
    rows = np.flatnonzero(present)
    assert sub.observed == tuple(rows.tolist())
    assert_allclose(sub.R, cov.R[np.ix_(rows, rows)], atol=1e-12)
    assert_allclose(sub.R_inv, np.linalg.inv(cov.R[np.ix_(rows, rows)]), rtol=1e-8, atol=1e-10)


def test_subset_block_full_and_empty_masks(standard_h):
    cov = assemble_block_covariance(standard_h)
    assert subset_block(cov, np.ones(4, dtype=bool)) is cov
    with pytest.raises(PanelValueError, match="All-missing"):
        subset_block(cov, np.zeros(4, dtype=bool))


def test_observation_mask_requires_one_score_per_student():
    with pytest.raises(PanelValueError, match="no observed score"):
        ObservationMask(np.array([[True, False], [False, False]]))
    mask = ObservationMask(np.array([[True, False], [True, True]]))
    assert mask.observed_fraction == pytest.approx(0.75)


def test_variance_components_from_rho():
    vc = ScalarVarianceComponents.from_rho(0.7)
    assert vc.nu2 == pytest.approx(0.7)
    assert vc.sigma2 == pytest.approx(0.3)
    assert vc.rho == pytest.approx(0.7)
    with pytest.raises(PanelValueError):
        ScalarVarianceComponents.from_rho(1.0)


def test_validate_design_flags_time_invariant_column(balanced_design):
    report = validate_design(balanced_design, with_student_indicators=True)
    assert report.rank == 2
    assert report.dependent_columns == ("intercept",)
    assert validate_design(balanced_design, with_student_indicators=False).full_rank


def test_validate_design_flags_collinear_columns(balanced_design):
    Z = np.column_stack([balanced_design.Z, balanced_design.Z[:, 1] + balanced_design.Z[:, 2]])
    design = PanelDesign(
        Z=Z,
        student=balanced_design.student,
        time=balanced_design.time,
        T=balanced_design.T,
        column_names=("intercept", "x1", "x2", "x1_plus_x2"),
    )
    report = validate_design(design, with_student_indicators=False)
    assert report.rank == 3
    assert len(report.dependent_columns) == 1
