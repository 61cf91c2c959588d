import math

import numpy as np
import pytest
from scipy import stats

from errors import (
    AllColumnsDroppedError,
    MissingBetaColumnError,
    NonFiniteInputError,
    SingularGramError,
    ZeroDenominatorError,
)
from models import (
    PAD_LABEL,
    AssignmentMatrix,
    CiReference,
    DesignSpec,
    DgpParams,
    Estimator,
    VcovCorrection,
)
from services import estimate
from services.dgp import expected_outcomes, simulate_outcomes
from services.estimate import (
    ColumnTag,
    DesignMatrix,
    FitResult,
    build_dm_matrix,
    build_lm_matrix,
    cluster_robust_vcov,
    critical_value,
    estimate_contrasts,
    haate_contrast_dm,
    haate_contrast_lm,
    haate_ratio_dm,
    ols_fit,
    ratio_effect,
)
from services.randomize import assign_two_stage
from services.rng import RngStream
from tests.conftest import homogeneous_assignment

UNIFORM3 = np.full((1, 3), 1 / 3)


def _assignment(labels) -> AssignmentMatrix:
    labels = np.asarray(labels)
    return AssignmentMatrix.from_labels(labels, np.repeat(UNIFORM3, labels.shape[0], axis=0))


def _plain_design(x: np.ndarray, clusters: np.ndarray) -> DesignMatrix:
    tags = tuple(ColumnTag.beta(m) for m in range(x.shape[1]))
    return DesignMatrix(x=x, column_tags=tags, cluster_index=clusters, unit_mask=np.ones((x.shape[0], 1), bool))


def _simulated(seed: int, alpha_bar: float = 0.5, c: float = 0.5, J: int = 40, n: int = 20):
    spec = DesignSpec.balanced(J=J, n=n, M=2, alpha_bar=alpha_bar)
    a = assign_two_stage(spec, RngStream(seed))
    out = simulate_outcomes(a, DgpParams.benchmark(c=c, rho_u=0.3), RngStream(seed).child("y"))
    return a, out


# ---- design matrices ----

def test_tags_render_and_parse():
    assert str(ColumnTag.delta(1, 2)) == "delta_1_2"
    assert ColumnTag.parse("beta_0") == ColumnTag.beta(0)
    assert ColumnTag.parse("delta_2_1") == ColumnTag.delta(2, 1)
    with pytest.raises(ValueError):
        ColumnTag.parse("gamma_1")


def test_lm_row_for_mixed_cluster():
    labels = np.array([[0] * 10, [0, 0, 1, 1, 1, 1, 1, 2, 2, 2]])
    design = build_lm_matrix(_assignment(labels))
    assert design.x.shape == (20, 9)
    col = {tag: k for k, tag in enumerate(design.column_tags)}

    treated = design.x[12]  # cluster 1, unit 2 -> arm 1, p = (0.2, 0.5, 0.3)
    assert treated[col[ColumnTag.beta(1)]] == 1.0
    assert treated[col[ColumnTag.delta(1, 1)]] == pytest.approx(0.5)
    assert treated[col[ColumnTag.delta(1, 2)]] == pytest.approx(0.3)
    assert np.count_nonzero(treated) == 3

    control = design.x[0]  # homogeneous control cluster
    assert control[col[ColumnTag.beta(0)]] == 1.0
    assert np.count_nonzero(control) == 1


def test_beta_block_is_one_hot():
    a, _ = _simulated(1)
    lm = build_lm_matrix(a)
    np.testing.assert_array_equal(lm.x[:, :3].sum(axis=1), 1.0)
    dm = build_dm_matrix(a)
    assert dm.x.shape == (a.labels.size, 3)
    np.testing.assert_array_equal(dm.x.sum(axis=0), a.arm_counts())


# ---- fitting ----

def test_dm_fit_recovers_group_means():
    labels = np.array([[0, 0, 1, 2], [1, 1, 2, 0], [2, 0, 1, 1]])
    y = np.array([5.0, 7.5, 2.5])[labels]
    fit = ols_fit(build_dm_matrix(_assignment(labels)), y)
    np.testing.assert_allclose(fit.coefficients, [5.0, 7.5, 2.5], atol=1e-10)
    assert fit.dropped == ()


def test_dm_fit_equals_pooled_arm_means():
    a, out = _simulated(2)
    fit = ols_fit(build_dm_matrix(a), out)
    for m in range(3):
        assert fit.coef(ColumnTag.beta(m)) == pytest.approx(out.y[a.labels == m].mean(), abs=1e-10)


def test_small_full_rank_fit_matches_normal_equations():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    y = np.array([1.0, 2.0, 4.0])
    fit = ols_fit(_plain_design(x, np.arange(3)), y)
    np.testing.assert_allclose(fit.coefficients, np.linalg.solve(x.T @ x, x.T @ y), atol=1e-10)


def test_residuals_are_orthogonal_to_retained_columns():
    a, out = _simulated(3)
    design = build_lm_matrix(a)
    fit = ols_fit(design, out)
    resp = design.response(out)
    scale = np.linalg.norm(fit.x_retained) * np.linalg.norm(resp)
    assert np.abs(fit.x_retained.T @ fit.residuals).max() < 1e-8 * scale


def test_homogeneous_clusters_reduce_lm_to_dm():
    a = homogeneous_assignment(30, 8)
    y = simulate_outcomes(a, DgpParams.benchmark(c=1.0, rho_u=0.2), RngStream(4))
    lm = ols_fit(build_lm_matrix(a), y)
    dm = ols_fit(build_dm_matrix(a), y)
    assert all(tag.is_beta for tag in lm.retained)
    assert len(lm.dropped) == 6
    np.testing.assert_allclose(lm.coefficients, dm.coefficients, atol=1e-10)
    np.testing.assert_allclose(lm.vcov, dm.vcov, atol=1e-12)

    lm_ct = haate_contrast_lm(lm, 1)
    dm_ct = haate_contrast_dm(dm, 1)
    assert lm_ct.degraded
    assert lm_ct.estimate == pytest.approx(dm_ct.estimate)
    assert lm_ct.se == pytest.approx(dm_ct.se)


def test_noiseless_homogeneous_lm_contrast():
    a = homogeneous_assignment(30, 8)
    y = expected_outcomes(a, DgpParams.benchmark(c=1.0))
    lm = ols_fit(build_lm_matrix(a), y)
    assert haate_contrast_lm(lm, 1).estimate == pytest.approx(3.5, abs=1e-10)


def test_noiseless_mixed_lm_recovers_true_haate():
    a, _ = _simulated(5, alpha_bar=0.5, J=60)
    params = DgpParams.benchmark(c=1.0)
    lm = ols_fit(build_lm_matrix(a), expected_outcomes(a, params))
    assert haate_contrast_lm(lm, 1).estimate == pytest.approx(3.5, abs=1e-8)
    assert haate_contrast_lm(lm, 2).estimate == pytest.approx(-5.0, abs=1e-8)


def test_non_finite_outcomes_raise():
    a, out = _simulated(6)
    y = out.y.copy()
    y[0, 0] = np.nan
    with pytest.raises(NonFiniteInputError):
        ols_fit(build_dm_matrix(a), y)


def test_all_zero_design_raises():
    with pytest.raises(AllColumnsDroppedError):
        ols_fit(_plain_design(np.zeros((4, 2)), np.arange(4)), np.ones(4))


def test_missing_arm_raises_on_contrast():
    labels = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1]])
    fit = ols_fit(build_dm_matrix(_assignment(labels)), np.arange(9, dtype=float).reshape(3, 3))
    assert ColumnTag.beta(2) in fit.dropped
    assert haate_contrast_dm(fit, 1).arm == 1
    with pytest.raises(MissingBetaColumnError):
        haate_contrast_dm(fit, 2)


# ---- cluster-robust variance ----

def test_singleton_clusters_give_hc0():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(50, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=50)
    fit = ols_fit(_plain_design(x, np.arange(50)), y, correction=VcovCorrection.CR0)
    bread = np.linalg.inv(x.T @ x)
    hc0 = bread @ (x.T * fit.residuals ** 2) @ x @ bread
    np.testing.assert_allclose(fit.vcov, hc0, atol=1e-10)


def test_two_cluster_sandwich_by_hand():
    labels = np.array([[0, 1, PAD_LABEL], [0, 1, 1]])
    y = np.array([[1.0, 3.0, np.nan], [2.0, 4.0, 6.0]])
    fit = ols_fit(build_dm_matrix(_assignment(labels)), y)
    np.testing.assert_allclose(fit.coefficients, [1.5, 13 / 3], atol=1e-12)

    cr0 = np.array([[0.125, 2 / 9], [2 / 9, 32 / 81]])
    np.testing.assert_allclose(cluster_robust_vcov(fit, VcovCorrection.CR0), cr0, atol=1e-12)
    # J/(J-1) * (N-1)/(N-P) = 2 * 4/3
    np.testing.assert_allclose(fit.vcov, cr0 * 8 / 3, atol=1e-12)


def test_vcov_symmetric_psd_and_cluster_order_free():
    a, out = _simulated(8)
    fit = ols_fit(build_lm_matrix(a), out)
    np.testing.assert_array_equal(fit.vcov, fit.vcov.T)
    eig = np.linalg.eigvalsh(fit.vcov)
    assert eig.min() >= -1e-8 * eig.max()

    perm = np.random.default_rng(1).permutation(a.n_clusters)
    shuffled = AssignmentMatrix.from_labels(a.labels[perm], a.cluster_probs[perm])
    refit = ols_fit(build_lm_matrix(shuffled), out.y[perm])
    assert refit.retained == fit.retained
    np.testing.assert_allclose(refit.vcov, fit.vcov, rtol=1e-8, atol=1e-12)


def test_fit_ignores_unit_order_within_clusters():
    a, out = _simulated(9)
    rng = np.random.default_rng(2)
    rows = np.arange(a.n_clusters)[:, None]
    perm = np.array([rng.permutation(a.labels.shape[1]) for _ in range(a.n_clusters)])
    shuffled = AssignmentMatrix.from_labels(a.labels[rows, perm], a.cluster_probs)
    for build in (build_lm_matrix, build_dm_matrix):
        fit = ols_fit(build(a), out)
        refit = ols_fit(build(shuffled), out.y[rows, perm])
        assert refit.retained == fit.retained
        np.testing.assert_allclose(refit.coefficients, fit.coefficients, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(refit.vcov, fit.vcov, rtol=1e-8, atol=1e-12)


def test_vcov_rejects_a_lopsided_sandwich(monkeypatch):
    a, out = _simulated(8)
    fit = ols_fit(build_dm_matrix(a), out)
    real = estimate.linalg.cho_solve

    def skewed(factor, b):
        solved = real(factor, b)
        return solved + np.triu(np.ones_like(solved), 1) * np.abs(solved).max()

    monkeypatch.setattr(estimate.linalg, "cho_solve", skewed)
    with pytest.raises(SingularGramError, match="symmetry"):
        cluster_robust_vcov(fit)


# ---- contrasts ----

def _identity_fit() -> FitResult:
    tags = (ColumnTag.beta(0), ColumnTag.beta(1), ColumnTag.delta(1, 1))
    return FitResult(
        coefficients=np.array([1.0, 2.0, 3.0]),
        retained=tags,
        dropped=(),
        residuals=np.zeros(4),
        x_retained=np.zeros((4, 3)),
        cluster_index=np.arange(4),
        n_clusters=4,
        vcov=np.eye(3),
    )


def test_lm_contrast_uses_three_coefficients():
    ct = haate_contrast_lm(_identity_fit(), 1, z=1.96)
    assert ct.estimate == pytest.approx(4.0)
    assert ct.se == pytest.approx(math.sqrt(3.0))
    assert not ct.degraded
    assert ct.ci_hi - ct.ci_lo == pytest.approx(2 * 1.96 * math.sqrt(3.0))
    assert ct == haate_contrast_lm(_identity_fit(), 1, z=1.96)


def test_dm_contrast_is_difference_of_means():
    labels = np.array([[0, 1], [1, 0], [0, 1]])
    y = np.array([5.0, 7.5])[labels[:, :2]]
    fit = ols_fit(build_dm_matrix(AssignmentMatrix.from_labels(labels, np.full((3, 2), 0.5))), y)
    assert haate_contrast_dm(fit, 1).estimate == pytest.approx(2.5)


def test_ratio_effect_examples():
    ratio, se = ratio_effect(10.0, 5.0, 0.0, 0.0, 0.0)
    assert ratio == 2.0 and se == 0.0
    ratio, se = ratio_effect(0.0, 5.0, 1.0, 0.0, 0.0)
    assert ratio == 0.0 and se == pytest.approx(0.2)
    with pytest.raises(ZeroDenominatorError):
        ratio_effect(1.0, 0.0, 1.0, 1.0, 0.0)


def test_ratio_effect_matches_log_form():
    ratio, se = ratio_effect(6.0, 4.0, 0.09, 0.04, 0.01)
    expected = 1.5 * math.sqrt(0.09 / 36 + 0.04 / 16 - 2 * 0.01 / 24)
    assert se == pytest.approx(expected)


def test_haate_ratio_from_noiseless_fit():
    labels = np.array([[0, 1, 2], [2, 1, 0], [1, 0, 2]])
    y = np.array([5.0, 7.5, 2.5])[labels]
    fit = ols_fit(build_dm_matrix(_assignment(labels)), y)
    ratio, _ = haate_ratio_dm(fit, 1)
    assert ratio == pytest.approx(1.5)


def test_critical_values():
    assert critical_value() == pytest.approx(1.959964)
    assert critical_value(CiReference.T, 100) == pytest.approx(stats.t.ppf(0.975, 99))
    assert critical_value(CiReference.T, 100) > critical_value()


def test_estimate_contrasts_returns_one_per_arm():
    a, out = _simulated(9)
    for estimator in Estimator:
        contrasts = estimate_contrasts(a, out, estimator)
        assert [c.arm for c in contrasts] == [1, 2]
        assert all(c.estimator is estimator for c in contrasts)
        assert all(c.ci_lo < c.estimate < c.ci_hi for c in contrasts)
