import numpy as np
import pytest

from errors import DegenerateGeometryError, IndexOutOfRangeError, OutOfRangeError
from models import AssignmentMatrix, DesignSpec, DgpParams
from services.dgp import (
    effective_slope,
    expected_outcome,
    expected_outcomes,
    simulate_outcomes,
    tau_squared,
    true_haate,
)
from services.randomize import assign_two_stage
from services.rng import RngStream


def _all_control(J: int, n: int) -> AssignmentMatrix:
    return AssignmentMatrix.from_labels(np.zeros((J, n), dtype=int), np.full((J, 3), 1 / 3))


def test_effective_slope_scales_once_by_c():
    assert effective_slope(DgpParams.benchmark(c=1.0), 2, 1) == pytest.approx(2.5)
    assert effective_slope(DgpParams.benchmark(c=0.0), 1, 2) == 0.0
    assert effective_slope(DgpParams.benchmark(c=0.5), 1, 2) == pytest.approx(-0.5)


def test_effective_slope_index_checks():
    params = DgpParams.benchmark(c=1.0)
    with pytest.raises(IndexOutOfRangeError):
        effective_slope(params, 0, 0)
    with pytest.raises(IndexOutOfRangeError):
        effective_slope(params, 3, 1)


def test_expected_outcome_examples():
    assert expected_outcome(DgpParams.benchmark(c=0.3), 0, (1, 0, 0)) == pytest.approx(5.0)
    assert expected_outcome(DgpParams.benchmark(c=1.0), 1, (0, 1, 0)) == pytest.approx(8.5)
    assert expected_outcome(DgpParams.benchmark(c=0.5), 2, (0, 0, 1)) == pytest.approx(1.25)


def test_expected_outcomes_ignore_proportions_without_interference():
    spec = DesignSpec.balanced(J=20, n=10, M=2, alpha_bar=1.0)
    a = assign_two_stage(spec, RngStream(4))
    mu = expected_outcomes(a, DgpParams.benchmark(c=0.0))
    np.testing.assert_allclose(mu, np.array([5.0, 7.5, 2.5])[a.labels])


def test_expected_outcomes_match_scalar_form():
    spec = DesignSpec.balanced(J=15, n=8, M=2, alpha_bar=0.4)
    a = assign_two_stage(spec, RngStream(8))
    params = DgpParams.benchmark(c=0.5)
    mu = expected_outcomes(a, params)
    for j in (0, 7, 14):
        for i in (0, 3, 7):
            assert mu[j, i] == pytest.approx(expected_outcome(params, a.labels[j, i], a.proportions[j]))


def test_tau_squared_values():
    assert tau_squared(DgpParams.benchmark(rho_u=0.0)) == 0.0
    assert tau_squared(DgpParams.benchmark(rho_u=0.5)) == pytest.approx(1.0)
    assert tau_squared(DgpParams.benchmark(rho_u=0.8)) == pytest.approx(4.0)
    with pytest.raises(OutOfRangeError):
        tau_squared(DgpParams.benchmark(rho_u=1.0))


@pytest.mark.parametrize(
    "c, psi1, psi2",
    [(0.0, 2.5, -2.5), (0.1, 2.6, -2.75), (0.5, 3.0, -3.75), (1.0, 3.5, -5.0)],
)
def test_true_haate_table(c, psi1, psi2):
    params = DgpParams.benchmark(c=c)
    assert true_haate(params, 1) == pytest.approx(psi1)
    assert true_haate(params, 2) == pytest.approx(psi2)


def test_true_haate_rejects_control():
    with pytest.raises(IndexOutOfRangeError):
        true_haate(DgpParams.benchmark(), 0)


def test_noiseless_outcomes_equal_expectation():
    spec = DesignSpec.balanced(J=10, n=6, M=2, alpha_bar=1.0)
    a = assign_two_stage(spec, RngStream(1))
    params = DgpParams.benchmark(c=1.0, sigma2=1e-18)
    out = simulate_outcomes(a, params, RngStream(2))
    np.testing.assert_allclose(out.y, expected_outcomes(a, params), atol=1e-6)


def test_simulate_rejects_invalid_params_and_mismatched_arms():
    a = _all_control(4, 3)
    with pytest.raises(OutOfRangeError):
        simulate_outcomes(a, DgpParams.benchmark(rho_u=1.0), RngStream(1))
    four_arms = DgpParams(beta=(1.0, 2.0, 3.0, 4.0), delta_base=((0.0,) * 3,) * 4)
    with pytest.raises(DegenerateGeometryError):
        simulate_outcomes(a, four_arms, RngStream(1))


def test_control_mean_and_cluster_mean_variance():
    J, n = 10_000, 50
    params = DgpParams.benchmark(rho_u=0.8)
    out = simulate_outcomes(_all_control(J, n), params, RngStream(17))
    cluster_means = out.y.mean(axis=1)
    expected_var = 4.0 + 1.0 / n
    se_var = expected_var * np.sqrt(2.0 / (J - 1))
    assert abs(cluster_means.var(ddof=1) - expected_var) < 4 * se_var
    assert abs(cluster_means.mean() - 5.0) < 4 * np.sqrt(expected_var / J)


def test_within_cluster_covariance_is_tau_squared():
    R = 10_000
    params = DgpParams.benchmark(rho_u=0.5)
    a = _all_control(2, 2)
    ys = np.array([simulate_outcomes(a, params, RngStream(99).child(r)).y.ravel() for r in range(R)])
    cov = np.cov(ys, rowvar=False)
    # Var(Y) = sigma^2 + tau^2 = 2, same-cluster covariance tau^2 = 1
    assert cov[0, 0] == pytest.approx(2.0, abs=0.12)
    assert cov[0, 1] == pytest.approx(1.0, abs=0.09)
    assert cov[0, 2] == pytest.approx(0.0, abs=0.08)
