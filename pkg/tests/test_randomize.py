import math

import numpy as np
import pytest
from scipy import stats

from errors import (
    DegenerateVarianceError,
    DimensionUnsupportedError,
    EmptyTableError,
    IndexOutOfRangeError,
    NonPositiveAlphaError,
    OutOfRangeError,
)
from models import AssignmentMatrix, AssignmentMode, DesignSpec
from services.randomize import (
    SobolDrawTable,
    _categorical,
    alpha_for_icc,
    assign_from_table,
    assign_two_stage,
    build_sobol_table,
    draw_dirichlet,
    empirical_icc,
    proportion_dispersion_ratio,
    sample_dirichlet_matrix,
    table_row_for,
    treatment_icc,
)
from services.rng import RngStream
from services.thresholds import SCALED_ALPHA_GRID, SOBOL_MAX_DIM
from tests.conftest import homogeneous_assignment


# ---- treatment ICC ----

def test_treatment_icc_reference_points():
    assert treatment_icc(1.0, 2) == pytest.approx(0.5, abs=1e-12)
    assert treatment_icc(1000.0 / 3, 2) == pytest.approx(0.031607, abs=1e-6)


def test_treatment_icc_limits_and_monotonicity():
    assert treatment_icc(1e-12, 2) > 0.999999
    assert treatment_icc(1e12, 2) < 1e-5
    values = [treatment_icc(s / 3, 2) for s in SCALED_ALPHA_GRID]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("alpha_bar", [0.0, -1.0, float("nan")])
def test_treatment_icc_rejects_non_positive_alpha(alpha_bar):
    with pytest.raises(NonPositiveAlphaError):
        treatment_icc(alpha_bar, 2)


def test_alpha_for_icc_reference_points():
    assert alpha_for_icc(0.5, 2) == pytest.approx(1.0, abs=1e-12)
    assert alpha_for_icc(1 / math.sqrt(2), 1) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("rho", [0.0, 1.0, 1.5, -0.2])
def test_alpha_for_icc_rejects_out_of_range(rho):
    with pytest.raises(OutOfRangeError):
        alpha_for_icc(rho, 2)


def test_alpha_for_icc_inverts_treatment_icc():
    for M in (1, 2, 5):
        for a in np.logspace(-4, 4, 25):
            assert alpha_for_icc(treatment_icc(a, M), M) == pytest.approx(a, rel=1e-10)


def test_dispersion_ratio_poles():
    assert proportion_dispersion_ratio(0.001 / 3, 2, 50) == pytest.approx(0.999, abs=1e-3)
    assert proportion_dispersion_ratio(1000.0 / 3, 2, 50) == pytest.approx(0.021, abs=1e-3)
    assert proportion_dispersion_ratio(1.0, 2, 1) == pytest.approx(1.0)


# ---- Dirichlet draws ----

def test_dirichlet_means_match_alpha():
    alpha = np.array([0.5, 0.5, 0.5])
    draws = sample_dirichlet_matrix(alpha, 100_000, RngStream(11))
    a0 = alpha.sum()
    mean = alpha / a0
    var = mean * (1 - mean) / (a0 + 1)
    se = np.sqrt(var / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se)


def test_dirichlet_two_ones_is_uniform_marginal():
    draws = sample_dirichlet_matrix([1.0, 1.0], 100_000, RngStream(12))
    assert draws[:, 0].var() == pytest.approx(1 / 12, abs=0.0015)


def test_dirichlet_huge_component_dominates():
    draw = draw_dirichlet([1e9, 1.0, 1.0], RngStream(13))
    assert draw[0] > 0.999999


def test_dirichlet_tiny_alpha_stays_on_simplex():
    draws = sample_dirichlet_matrix([1e-4] * 3, 5_000, RngStream(14))
    assert np.all(np.isfinite(draws))
    assert np.all(draws > 0) and np.all(draws <= 1)
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_dirichlet_rejects_bad_alpha():
    with pytest.raises(NonPositiveAlphaError):
        sample_dirichlet_matrix([1.0, 0.0, 1.0], 3, RngStream(1))


# ---- two-stage assignment ----

def test_assign_two_stage_is_reproducible():
    spec = DesignSpec.balanced(J=50, n=20, M=2, alpha_bar=0.7)
    a = assign_two_stage(spec, RngStream(5).child("x"))
    b = assign_two_stage(spec, RngStream(5).child("x"))
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.cluster_probs, b.cluster_probs)
    c = assign_two_stage(spec, RngStream(6).child("x"))
    assert not np.array_equal(a.labels, c.labels)


def test_assign_two_stage_shapes():
    spec = DesignSpec.balanced(J=30, n=12, M=3, alpha_bar=1.0)
    a = assign_two_stage(spec, RngStream(1))
    assert a.labels.shape == (30, 12)
    assert a.cluster_probs.shape == (30, 4)
    assert a.labels.min() >= 0 and a.labels.max() <= 3
    np.testing.assert_allclose(a.proportions.sum(axis=1), 1.0, atol=1e-12)


def test_assign_two_stage_rejects_sobol_mode():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=1.0, mode=AssignmentMode.SOBOL_DIRICHLET, K=4)
    with pytest.raises(OutOfRangeError):
        assign_two_stage(spec, RngStream(1))


def test_tiny_alpha_gives_homogeneous_clusters():
    spec = DesignSpec.balanced(J=1000, n=50, M=2, alpha_bar=1e-4)
    a = assign_two_stage(spec, RngStream(21))
    single = (a.labels == a.labels[:, :1]).all(axis=1)
    assert single.mean() > 0.95


def test_floored_entries_are_never_drawn():
    probs = np.array([[1e-300, 1.0, 1e-300], [1e-300, 1e-300, 1.0], [1.0, 1e-300, 1e-300]])
    u = np.tile([0.0, 0.5, np.nextafter(1.0, 0.0)], (3, 1))
    assert _categorical(probs, u).tolist() == [[1, 1, 1], [2, 2, 2], [0, 0, 0]]


def test_huge_alpha_gives_unit_level_randomization():
    spec = DesignSpec.balanced(J=1000, n=50, M=2, alpha_bar=1e6)
    a = assign_two_stage(spec, RngStream(22))
    for arm in range(3):
        assert abs(empirical_icc(a, arm)) < 0.02


def test_pooled_arm_frequencies_match_alpha_share():
    spec = DesignSpec.balanced(J=2000, n=50, M=2, alpha_bar=1.0)
    a = assign_two_stage(spec, RngStream(23))
    freq = a.arm_counts() / a.labels.size
    np.testing.assert_allclose(freq, 1 / 3, atol=0.025)


@pytest.mark.parametrize("alpha_bar", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("n", [10, 50])
def test_within_cluster_counts_are_beta_binomial(alpha_bar, n):
    J = 10_000
    spec = DesignSpec.balanced(J=J, n=n, M=2, alpha_bar=alpha_bar)
    a = assign_two_stage(spec, RngStream(31).child(alpha_bar, n))
    counts = (a.labels == 1).sum(axis=1)

    observed = np.bincount(counts, minlength=n + 1).astype(float)
    expected = J * stats.betabinom.pmf(np.arange(n + 1), n, alpha_bar, 2 * alpha_bar)
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    exp *= obs.sum() / exp.sum()
    assert stats.chisquare(obs, exp).pvalue > 0.001


def test_empirical_icc_tracks_beta_binomial_correlation():
    spec = DesignSpec.balanced(J=1000, n=50, M=2, alpha_bar=1.0)
    a = assign_two_stage(spec, RngStream(24))
    # 1 / ((M+1) a + 1) for the indicator of any single arm
    assert empirical_icc(a, 1) == pytest.approx(0.25, abs=0.05)


# ---- empirical ICC ----

def test_empirical_icc_homogeneous_is_one():
    assert empirical_icc(homogeneous_assignment(30, 10), 1) == pytest.approx(1.0)


def test_empirical_icc_iid_is_near_zero():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(2000, 50))
    a = AssignmentMatrix.from_labels(labels, np.full((2000, 3), 1 / 3))
    assert abs(empirical_icc(a, 0)) < 0.01


def test_empirical_icc_constant_indicator_raises():
    a = AssignmentMatrix.from_labels(np.zeros((5, 4), dtype=int), np.full((5, 3), 1 / 3))
    with pytest.raises(DegenerateVarianceError):
        empirical_icc(a, 0)
    with pytest.raises(IndexOutOfRangeError):
        empirical_icc(a, 3)


# ---- Sobol tables ----

def test_sobol_single_row_is_uniform():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=0.05, mode=AssignmentMode.SOBOL_DIRICHLET, K=1)
    table = build_sobol_table(spec)
    assert table.K == 1 and table.M == 2
    np.testing.assert_allclose(table.vectors[0], 1 / 3, atol=1e-12)


def test_sobol_table_rows_are_on_simplex_and_average_out():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=1.0, mode=AssignmentMode.SOBOL_DIRICHLET, K=256)
    table = build_sobol_table(spec)
    assert table.vectors.shape == (256, 3)
    np.testing.assert_allclose(table.vectors.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(table.vectors.mean(axis=0), 1 / 3, atol=0.02)


def test_sobol_table_is_deterministic_and_handles_tiny_alpha():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=1e-3, mode=AssignmentMode.SOBOL_DIRICHLET, K=8)
    a, b = build_sobol_table(spec), build_sobol_table(spec)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.all(np.isfinite(a.vectors)) and np.all(a.vectors > 0)
    np.testing.assert_allclose(a.vectors.sum(axis=1), 1.0, atol=1e-12)


def test_sobol_table_rejects_too_many_arms():
    spec = DesignSpec.balanced(J=2, n=2, M=SOBOL_MAX_DIM, alpha_bar=1.0)
    with pytest.raises(DimensionUnsupportedError):
        build_sobol_table(spec, K=1)


def test_assign_from_table_uniform_row():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=0.05, mode=AssignmentMode.SOBOL_DIRICHLET, K=1)
    table = build_sobol_table(spec)
    ids = [f"school-{j}" for j in range(200)]
    a = assign_from_table(ids, [50] * 200, table, RngStream(3))
    np.testing.assert_allclose(a.arm_counts() / a.labels.size, 1 / 3, atol=0.02)


def test_assign_from_table_is_keyed_by_cluster_id():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=0.5, mode=AssignmentMode.SOBOL_DIRICHLET, K=16)
    table = build_sobol_table(spec)
    ids = ["a", "b", "a", "c"]
    first = assign_from_table(ids, [8, 8, 8, 8], table, RngStream(9))
    second = assign_from_table(ids, [8, 8, 8, 8], table, RngStream(9))
    assert np.array_equal(first.labels, second.labels)
    assert np.array_equal(first.cluster_probs[0], first.cluster_probs[2])
    assert table_row_for("a", 16, 9) == table_row_for("a", 16, 9)
    assert first.cluster_ids == ("a", "b", "a", "c")


def test_assign_from_table_pads_unequal_sizes():
    spec = DesignSpec.balanced(J=10, n=5, M=2, alpha_bar=0.5, mode=AssignmentMode.SOBOL_DIRICHLET, K=4)
    table = build_sobol_table(spec)
    a = assign_from_table([1, 2, 3], [3, 7, 5], table, RngStream(2))
    assert a.labels.shape == (3, 7)
    assert a.unit_counts.tolist() == [3, 7, 5]
    assert a.is_padded
    np.testing.assert_allclose(a.proportions.sum(axis=1), 1.0, atol=1e-12)


def test_assign_from_empty_table_raises():
    table = SobolDrawTable(vectors=np.zeros((0, 3)), alpha=(1.0, 1.0, 1.0))
    with pytest.raises(EmptyTableError):
        assign_from_table(["a"], [3], table, RngStream(1))
