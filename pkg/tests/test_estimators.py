import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from utils.diagnostics import SelectionSpec, expected_gls_bias
from utils.errors import PanelValueError, RankDeficiencyError
from utils.estimators import (
    class_means,
    estimate_R_mom,
    feasible_gls,
    fixed_effects,
    gamma,
    gls_known_R,
    ols,
    re_quasi_demeaned,
)
from utils.panel_core import (
    HeterogeneityModel,
    ObservationMask,
    PanelDesign,
    ScalarVarianceComponents,
    assemble_block_covariance,
    covariance_from_matrix,
    standard_model,
)
from utils.simgen import TeacherSimConfig, gen_teacher_scores, substream, teacher_column


def _balanced(rng, n, T, k):
    student = np.repeat(np.arange(n), T)
    time = np.tile(np.arange(T), n)
    Z = np.column_stack([np.ones(n * T), rng.standard_normal((n * T, k - 1))])
    return PanelDesign(Z=Z, student=student, time=time, T=T)


def _standard_response(rng, design, vc, beta):
    delta = np.sqrt(vc.nu2) * rng.standard_normal(design.n)
    eps = np.sqrt(vc.sigma2) * rng.standard_normal(design.n_rows)
    return design.Z @ beta + delta[design.student] + eps


@pytest.mark.parametrize("rho,expected", [(0.7, 0.9210526315789473), (0.8, 0.9523809523809523)])
def test_gamma_t_band(rho, expected):
    _, gamma_t = gamma(ScalarVarianceComponents.from_rho(rho), 5)
    assert abs(gamma_t - expected) < 1e-12


def test_gamma_limits():
    assert gamma(ScalarVarianceComponents(nu2=0.0, sigma2=1.0), 10) == (0.0, 0.0)
    g, gamma_t = gamma(ScalarVarianceComponents(nu2=1.0, sigma2=1.0), 1)
    assert g == pytest.approx(0.5)
    assert gamma_t == pytest.approx(0.5)


def test_quasi_demeaned_form_equals_gls_on_random_instances():
    rng = substream(2024)
    for _ in range(100):
        n = int(rng.integers(5, 101))
        T = int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        design = _balanced(rng, n, T, k)
        vc = ScalarVarianceComponents(nu2=float(rng.uniform(0.05, 2.0)), sigma2=float(rng.uniform(0.1, 2.0)))
        y = _standard_response(rng, design, vc, rng.standard_normal(k))

        quasi = re_quasi_demeaned(design, y, vc).theta
        gls = gls_known_R(design, y, assemble_block_covariance(vc.to_heterogeneity(T))).theta
        assert_allclose(quasi, gls, rtol=1e-8, atol=1e-10)


def test_quasi_demeaning_interpolates_ols_and_fe(rng):
    design = _balanced(rng, 40, 4, 3).select_columns([1, 2])
    vc = ScalarVarianceComponents(nu2=1.0, sigma2=1.0)
    y = _standard_response(rng, design, vc, np.array([0.5, -1.0]))
    assert_allclose(re_quasi_demeaned(design, y, vc, gamma_t=0.0).theta, ols(design, y).theta, atol=1e-10)
    assert_allclose(re_quasi_demeaned(design, y, vc, gamma_t=1.0).theta, fixed_effects(design, y).theta, atol=1e-10)


def test_ols_matches_least_squares(balanced_design, rng):
    y = rng.standard_normal(balanced_design.n_rows)
    result = ols(balanced_design, y)
    expected, *_ = np.linalg.lstsq(balanced_design.Z, y, rcond=None)
    assert_allclose(result.theta, expected, atol=1e-10)
    assert result.estimator == "OLS"
    assert list(result.as_series().index) == ["intercept", "x1", "x2"]


def test_fixed_effects_matches_dummy_regression(balanced_design, rng):
    design = balanced_design.select_columns([1, 2])
    y = rng.standard_normal(design.n_rows)
    dummies = np.eye(design.n)[design.student]
    expected, *_ = np.linalg.lstsq(np.hstack([design.Z, dummies]), y, rcond=None)
    assert_allclose(fixed_effects(design, y).theta, expected[:2], atol=1e-10)


def test_fixed_effects_names_time_invariant_columns(balanced_design, rng):
    with pytest.raises(RankDeficiencyError) as err:
        fixed_effects(balanced_design, rng.standard_normal(balanced_design.n_rows))
    assert err.value.dependent_columns == ("intercept",)


def test_collinear_design_raises_rank_deficiency(balanced_design, rng):
    Z = np.column_stack([balanced_design.Z, 2.0 * balanced_design.Z[:, 1]])
    design = PanelDesign(Z=Z, student=balanced_design.student, time=balanced_design.time, T=balanced_design.T)
    with pytest.raises(RankDeficiencyError) as err:
        ols(design, rng.standard_normal(design.n_rows))
    assert len(err.value.dependent_columns) == 1
    assert isinstance(err.value, np.linalg.LinAlgError)


def test_response_length_checked(balanced_design):
    with pytest.raises(PanelValueError, match="entries"):
        ols(balanced_design, np.zeros(3))


def test_gls_unbalanced_matches_dense_solution(rng):
    T = 5
    full = _balanced(rng, 30, T, 3)
    keep = rng.random(full.n_rows) < 0.6
    keep[full.time == 0] = True
    design = full.subset_rows(keep)
    G = rng.standard_normal((T, 2))
    h = HeterogeneityModel(A=np.hstack([np.full((T, 1), 0.8), G]), S=np.eye(3), Psi=0.4 * np.eye(T))
    cov = assemble_block_covariance(h)
    y = rng.standard_normal(design.n_rows)

    R_full = np.zeros((design.n_rows, design.n_rows))
    for rows in design.student_rows():
        t = design.time[rows]
        R_full[np.ix_(rows, rows)] = cov.R[np.ix_(t, t)]
    W = np.linalg.inv(R_full)
    expected = np.linalg.solve(design.Z.T @ W @ design.Z, design.Z.T @ W @ y)

    result = gls_known_R(design, y, cov, ObservationMask.from_design(design))
    assert_allclose(result.theta, expected, rtol=1e-8, atol=1e-10)
    assert_allclose(result.param_cov, np.linalg.inv(design.Z.T @ W @ design.Z), rtol=1e-8, atol=1e-12)


def test_gls_rejects_mismatched_mask_and_covariance(balanced_design, standard_h):
    y = np.zeros(balanced_design.n_rows)
    cov = assemble_block_covariance(standard_h)
    present = np.ones((balanced_design.n, balanced_design.T), dtype=bool)
    present[:, 0] = False
    wrong = ObservationMask(present)
    with pytest.raises(PanelValueError, match="mask"):
        gls_known_R(balanced_design, y, cov, wrong)
    with pytest.raises(PanelValueError, match="Covariance"):
        gls_known_R(balanced_design, y, assemble_block_covariance(standard_model(3, 1.0, 1.0)))


def test_gls_with_identity_covariance_is_ols(balanced_design, rng):
    y = rng.standard_normal(balanced_design.n_rows)
    cov = covariance_from_matrix(np.eye(balanced_design.T))
    assert_allclose(gls_known_R(balanced_design, y, cov).theta, ols(balanced_design, y).theta, atol=1e-10)


def test_moment_covariance_recovers_truth(rng):
    T = 3
    design = _balanced(rng, 3000, T, 2)
    vc = ScalarVarianceComponents(nu2=0.5, sigma2=0.5)
    y = _standard_response(rng, design, vc, np.array([1.0, 0.5]))
    R_hat = estimate_R_mom(design, y)
    assert_allclose(R_hat, vc.to_heterogeneity(T).implied_covariance(), atol=0.08)

    result = feasible_gls(design, y)
    known = gls_known_R(design, y, assemble_block_covariance(vc.to_heterogeneity(T)))
    assert result.estimator == "GLS-feasible"
    assert result.r_hat is not None
    assert_allclose(result.theta, known.theta, atol=0.02)


def test_moment_covariance_needs_more_students_than_scores(rng):
    design = _balanced(rng, 3, 4, 1)
    with pytest.raises(PanelValueError, match="Insufficient students"):
        estimate_R_mom(design, rng.standard_normal(design.n_rows))


def test_class_means():
    scores = pd.DataFrame({
        "grade": [0, 0, 0, 0, 1, 1],
        "subject": [0, 0, 0, 0, 0, 0],
        "class": [0, 0, 1, 1, 0, 1],
        "y": [1.0, 3.0, 5.0, 7.0, 2.0, 4.0],
    })
    means = class_means(scores, n_classes=2)
    assert means["estimate"].tolist() == [2.0, 6.0, 2.0, 4.0]
    assert means["count"].tolist() == [2, 2, 1, 1]
    with pytest.raises(PanelValueError, match="Empty classes"):
        class_means(scores[scores["class"] == 0], n_classes=2)


def test_gls_is_invariant_to_scaling_the_covariance(balanced_design, standard_h, rng):
    y = rng.standard_normal(balanced_design.n_rows)
    R1 = standard_h.implied_covariance()
    base = gls_known_R(balanced_design, y, covariance_from_matrix(R1)).theta
    scaled = gls_known_R(balanced_design, y, covariance_from_matrix(7.5 * R1)).theta
    assert_allclose(scaled, base, rtol=1e-10, atol=1e-12)


def test_fixed_effects_ignore_student_constant_shifts(rng):
    design = _balanced(rng, 30, 5, 3).select_columns([1, 2])
    y = rng.standard_normal(design.n_rows)
    shift = 10.0 * rng.standard_normal(design.n)
    assert_allclose(
        fixed_effects(design, y + shift[design.student]).theta, fixed_effects(design, y).theta, atol=1e-9
    )


def test_noise_free_response_is_recovered_exactly(rng, standard_h):
    design = _balanced(rng, 25, 4, 3)
    beta = np.array([1.5, -0.75, 2.0])
    y = design.Z @ beta
    cov = assemble_block_covariance(standard_h)
    assert_allclose(ols(design, y).theta, beta, atol=1e-10)
    assert_allclose(gls_known_R(design, y, cov).theta, beta, atol=1e-10)
    within = design.select_columns([1, 2])
    assert_allclose(fixed_effects(within, within.Z @ beta[1:]).theta, beta[1:], atol=1e-10)


def test_moment_covariance_of_noise_free_data_is_a_small_ridge(rng):
    design = _balanced(rng, 20, 3, 2)
    R_hat = estimate_R_mom(design, design.Z @ np.array([1.0, -2.0]))
    eigenvalues = np.linalg.eigvalsh(R_hat)
    assert eigenvalues.min() > 0.0
    assert eigenvalues.max() < 1e-8


def test_random_effects_without_student_variance_is_ols(balanced_design, rng):
    y = rng.standard_normal(balanced_design.n_rows)
    vc = ScalarVarianceComponents.from_rho(0.0)
    assert_allclose(re_quasi_demeaned(balanced_design, y, vc).theta, ols(balanced_design, y).theta, atol=1e-10)


def test_random_effects_approach_fixed_effects_as_rho_grows(rng):
    design = _balanced(rng, 40, 4, 3).select_columns([1, 2])
    y = _standard_response(rng, design, ScalarVarianceComponents(nu2=1.0, sigma2=1.0), np.array([0.5, -1.0]))
    fe = fixed_effects(design, y).theta
    gaps = [
        np.max(np.abs(re_quasi_demeaned(design, y, ScalarVarianceComponents.from_rho(rho)).theta - fe))
        for rho in (0.9, 0.999, 1.0 - 1e-9)
    ]
    assert gaps[2] < gaps[1] < gaps[0]
    assert gaps[2] < 1e-6


def _correlated_effects_draw(rng, n, T, beta):
    delta = rng.standard_normal(n)
    x = 0.8 * delta[:, None] + rng.standard_normal((n, T))
    y = beta * x + delta[:, None] + rng.standard_normal((n, T))
    design = PanelDesign(
        Z=np.column_stack([np.ones(n * T), x.ravel()]),
        student=np.repeat(np.arange(n), T),
        time=np.tile(np.arange(T), n),
        T=T,
    )
    return design, y.ravel()


def test_fixed_effects_unbiased_under_correlated_effects():
    rng = substream(77)
    fe, pooled = [], []
    for _ in range(300):
        design, y = _correlated_effects_draw(rng, 50, 4, 0.5)
        fe.append(fixed_effects(design.select_columns([1]), y).theta[0])
        pooled.append(ols(design, y).theta[1])
    fe, pooled = np.array(fe), np.array(pooled)
    se = fe.std(ddof=1) / np.sqrt(fe.size)
    assert abs(fe.mean() - 0.5) < 4.0 * se
    assert pooled.mean() - 0.5 > 10.0 * pooled.std(ddof=1) / np.sqrt(pooled.size)


def test_random_effects_bias_matches_prediction():
    rng = substream(78)
    design = _balanced(rng, 60, 4, 2)
    vc = ScalarVarianceComponents(nu2=0.5, sigma2=0.5)
    x_mean = design.Z[:, 1].reshape(design.n, design.T).mean(axis=1)
    m = 0.6 * x_mean
    beta = np.array([0.0, 1.0])
    errors = []
    for _ in range(400):
        delta = m + np.sqrt(vc.nu2) * rng.standard_normal(design.n)
        y = design.Z @ beta + delta[design.student] + np.sqrt(vc.sigma2) * rng.standard_normal(design.n_rows)
        errors.append(re_quasi_demeaned(design, y, vc).theta - beta)
    errors = np.array(errors)
    predicted = expected_gls_bias(design, vc, SelectionSpec(m))
    se = errors.std(axis=0, ddof=1) / np.sqrt(len(errors))
    assert (np.abs(errors.mean(axis=0) - predicted) <= 3.0 * se).all()
    assert abs(predicted[1]) > 3.0 * se[1]


def test_class_means_equal_ols_teacher_effects_without_persistence():
    cfg = TeacherSimConfig(n=100, S=2, alpha=0.0, seed=4)
    ds = gen_teacher_scores(cfg)
    G, S = cfg.G, cfg.S
    scores = pd.DataFrame({
        "grade": np.tile(np.repeat(np.arange(G), S), cfg.n),
        "subject": ds.subject,
        "class": np.repeat(ds.assignments["class"].to_numpy(), S),
        "y": ds.y,
    })
    means = class_means(scores, n_classes=cfg.n_classes)
    theta = ols(ds.design, ds.y).theta
    columns = [
        teacher_column(s, g, c, G, cfg.n_classes)
        for g, s, c in means[["grade", "subject", "class"]].itertuples(index=False)
    ]
    assert_allclose(theta[columns], means["estimate"].to_numpy(), atol=1e-10)
