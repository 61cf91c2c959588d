"""
Linear-in-means outcome model with cluster random effects.

    Y_ji = beta_a + sum_l c * delta_base[a][l] * p_j[l] + u_j + e_ji,   a = A_ji

u_j ~ N(0, tau^2) is shared by the cluster, e_ji ~ N(0, sigma^2) is
idiosyncratic, so Var(Y) = sigma^2 + tau^2 and two units of one cluster
covary by tau^2.  The interference multiplier c enters exactly once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import DegenerateGeometryError, IndexOutOfRangeError, OutOfRangeError
from models import AssignmentMatrix, DgpParams
from services.rng import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ErrorComponents:
    u: np.ndarray   # (J,)
    e: np.ndarray   # (J, n)


@dataclass(frozen=True)
class OutcomeMatrix:
    """Realized outcomes, J x n.  Padding slots of an unequal-size assignment hold NaN."""

    y: np.ndarray
    components: Optional[ErrorComponents] = None

    @property
    def shape(self):
        return self.y.shape


# ---- slopes and expected outcomes ----

def _check_arm(params: DgpParams, m: int, lowest: int = 0) -> None:
    if not lowest <= m <= params.M:
        raise IndexOutOfRangeError(f"arm {m} outside {lowest}..{params.M}")


def effective_slope(params: DgpParams, m: int, l: int) -> float:
    _check_arm(params, m)
    if not 1 <= l <= params.M:
        raise IndexOutOfRangeError(f"proportion index {l} outside 1..{params.M}")
    return float(params.delta_base[m][l - 1]) * params.c


def slope_matrix(params: DgpParams) -> np.ndarray:
    """(M+1) x M matrix of effective slopes; column l-1 holds arm l."""
    return np.asarray(params.delta_base, dtype=float) * params.c


def expected_outcome(params: DgpParams, a: int, p: Sequence[float]) -> float:
    _check_arm(params, a)
    p = np.asarray(p, dtype=float)
    if p.shape != (params.M + 1,):
        raise DegenerateGeometryError(f"proportion vector must have {params.M + 1} entries, got {p.shape}")
    return float(params.beta[a] + slope_matrix(params)[a] @ p[1:])


def _check_assignment(assignment: AssignmentMatrix, params: DgpParams) -> None:
    if assignment.M != params.M:
        raise DegenerateGeometryError(
            f"assignment has M={assignment.M} treatments but parameters describe M={params.M}"
        )


def expected_outcomes(assignment: AssignmentMatrix, params: DgpParams) -> np.ndarray:
    """expected_outcome evaluated at every (cluster, unit); padding gives NaN."""
    _check_assignment(assignment, params)
    mask = assignment.unit_mask()
    arms = np.where(mask, assignment.labels, 0)
    beta = np.asarray(params.beta, dtype=float)
    spill = slope_matrix(params)[arms] @ assignment.proportions[:, 1:, None]  # (J, n, 1)
    mu = beta[arms] + spill[..., 0]
    return np.where(mask, mu, np.nan)


def tau_squared(params: DgpParams) -> float:
    if not 0.0 <= params.rho_u < 1.0:
        raise OutOfRangeError(f"rho_u must lie in [0, 1), got {params.rho_u}")
    return params.sigma2 * params.rho_u / (1.0 - params.rho_u)


def true_haate(params: DgpParams, m: int) -> float:
    """(beta_m + delta_mm) - beta_0: everyone on arm m versus everyone on control."""
    _check_arm(params, m, lowest=1)
    return float(params.beta[m] + effective_slope(params, m, m) - params.beta[0])


# ---- simulation ----

def draw_errors(J: int, n: int, params: DgpParams, rng: RngStream) -> ErrorComponents:
    gen = rng.generator()
    u = gen.normal(0.0, np.sqrt(tau_squared(params)), size=J)
    e = gen.normal(0.0, np.sqrt(params.sigma2), size=(J, n))
    return ErrorComponents(u=u, e=e)


def simulate_outcomes(
    assignment: AssignmentMatrix,
    params: DgpParams,
    rng: RngStream,
) -> OutcomeMatrix:
    params.check()
    mu = expected_outcomes(assignment, params)
    J, n = assignment.labels.shape
    errs = draw_errors(J, n, params, rng)
    y = mu + errs.u[:, None] + errs.e
    return OutcomeMatrix(y=y, components=errs)
