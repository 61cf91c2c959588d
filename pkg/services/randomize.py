"""
Two-stage Dirichlet-multinomial randomization.

Stage one draws a probability vector pi_j ~ Dirichlet(alpha) per cluster;
stage two assigns every unit of the cluster i.i.d. from Categorical(pi_j).
With balanced alpha = (a, ..., a) the within-cluster count of any arm is
Beta-binomial(n, a, M*a) and the intra-cluster correlation of treatment is
controlled by the single knob a.

Deployment variant: instead of drawing pi_j fresh, a small table of K
quasi-random Dirichlet vectors is precomputed from an unscrambled Sobol
sequence and clusters are hashed onto table rows.

Small shapes (a << 1) are the interesting regime here, and plain Gamma
sampling underflows to exact zeros there, so every Gamma variate is kept in
log space and normalized with logsumexp.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc, gammaln, logsumexp
from scipy.stats import qmc

from errors import (
    DegenerateGeometryError,
    DegenerateVarianceError,
    DimensionUnsupportedError,
    EmptyTableError,
    IndexOutOfRangeError,
    NonPositiveAlphaError,
    OutOfRangeError,
)
from models import PAD_LABEL, AssignmentMatrix, AssignmentMode, DesignSpec, validate_design
from services.rng import RngStream, stable_hash64
from services.thresholds import DIRICHLET_FLOOR, INV_GAMMA_XTOL, SOBOL_MAX_DIM

logger = logging.getLogger(__name__)

SOBOL_DIRECTION_SET = "scipy-qmc-joe-kuo-6.21201"

# Below this log-argument exp() underflows and P(a, x) is evaluated by its
# leading series term instead.
_LOG_X_UNDERFLOW = -700.0


# ---------------------------------------------------------------------------
# Intra-cluster correlation of treatment
# ---------------------------------------------------------------------------

def _check_alpha_bar(alpha_bar: float) -> None:
    if not (math.isfinite(alpha_bar) and alpha_bar > 0):
        raise NonPositiveAlphaError(f"alpha_bar must be > 0, got {alpha_bar}")


def treatment_icc(alpha_bar: float, M: int) -> float:
    """rho_m(a) = 1 / sqrt((M+1)a + 1)."""
    _check_alpha_bar(alpha_bar)
    return 1.0 / math.sqrt((M + 1) * alpha_bar + 1.0)


def alpha_for_icc(rho_target: float, M: int) -> float:
    """Inverse of ``treatment_icc``: the balanced concentration giving ``rho_target``."""
    if not 0.0 < rho_target < 1.0:
        raise OutOfRangeError(f"target ICC must lie in (0, 1), got {rho_target}")
    return (1.0 / (rho_target * rho_target) - 1.0) / (M + 1)


def proportion_dispersion_ratio(alpha_bar: float, M: int, n: int) -> float:
    """Var(p_j[m]) / (pi (1 - pi)) for a cluster of ``n`` units.

    Equals (1 + (n-1) r) / n with r = 1/((M+1)a + 1), the Beta-binomial
    intra-class correlation.  Goes to 1 under cluster randomization and to
    1/n under unit randomization.
    """
    _check_alpha_bar(alpha_bar)
    if n < 1:
        raise DegenerateGeometryError(f"cluster size must be >= 1, got {n}")
    r = 1.0 / ((M + 1) * alpha_bar + 1.0)
    return (1.0 + (n - 1) * r) / n


# ---------------------------------------------------------------------------
# Dirichlet draws
# ---------------------------------------------------------------------------

def _as_alpha(alpha: Sequence[float]) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.ndim != 1 or a.size < 2:
        raise DegenerateGeometryError(f"alpha needs at least two components, got shape {a.shape}")
    if not (np.all(np.isfinite(a)) and np.all(a > 0)):
        raise NonPositiveAlphaError(f"Dirichlet concentrations must be > 0, got {a.tolist()}")
    return a


def _log_gamma_variates(alpha: np.ndarray, rows: int, gen: np.random.Generator) -> np.ndarray:
    """log G for G ~ Gamma(alpha_m, 1), shape (rows, len(alpha)).

    Shapes below one use the boost G(a) = G(a+1) * U^(1/a), evaluated as
    log G(a+1) + log(U)/a so the result stays finite for any a > 0.
    """
    small = alpha < 1.0
    shape = np.where(small, alpha + 1.0, alpha)
    log_g = np.log(gen.standard_gamma(shape, size=(rows, alpha.size)))
    if small.any():
        u = gen.random(size=(rows, alpha.size))
        boost = np.log1p(-u) / alpha  # 1-U is uniform on (0, 1]
        log_g = np.where(small, log_g + boost, log_g)
    return log_g


def _normalize_log_simplex(log_w: np.ndarray) -> np.ndarray:
    probs = np.exp(log_w - logsumexp(log_w, axis=-1, keepdims=True))
    return np.clip(probs, DIRICHLET_FLOOR, 1.0)


def sample_dirichlet_matrix(
    alpha: Sequence[float],
    rows: int,
    rng: Union[RngStream, np.random.Generator],
) -> np.ndarray:
    """``rows`` independent Dirichlet(alpha) vectors, one per row.

    With tiny concentrations a row can come back as an exact 1.0 with every
    other entry at DIRICHLET_FLOOR; rows still sum to 1 in float64.
    """
    a = _as_alpha(alpha)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return _normalize_log_simplex(_log_gamma_variates(a, rows, gen))


def draw_dirichlet(alpha: Sequence[float], rng: RngStream) -> np.ndarray:
    return sample_dirichlet_matrix(alpha, 1, rng)[0]


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draws: row j of ``u`` against row j of ``probs``.

    Rows may hold an exact 1.0 next to floor-valued entries.  Entries at the
    floor count as zero here so no draw, u = 0 included, lands on them.
    """
    live = np.where(probs > DIRICHLET_FLOOR, probs, 0.0)
    cdf = np.cumsum(live, axis=1)[:, :-1]
    return (u[:, :, None] >= cdf[:, None, :]).sum(axis=2).astype(np.int64)


def assign_two_stage(spec: DesignSpec, rng: RngStream) -> AssignmentMatrix:
    validate_design(spec)
    if spec.mode is not AssignmentMode.TWO_STAGE_DIRICHLET:
        raise OutOfRangeError(f"assign_two_stage needs mode two_stage_dirichlet, got {spec.mode.value}")
    probs = sample_dirichlet_matrix(spec.alpha, spec.J, rng.child("clusters"))
    u = rng.child("units").generator().random((spec.J, spec.n))
    return AssignmentMatrix.from_labels(_categorical(probs, u), probs)


# ---------------------------------------------------------------------------
# Sobol deployment tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SobolDrawTable:
    vectors: np.ndarray
    alpha: Tuple[float, ...]
    direction_set: str = SOBOL_DIRECTION_SET

    @property
    def K(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def M(self) -> int:
        return int(self.vectors.shape[1]) - 1


def _log_lower_gamma_p(a: float, t: float) -> float:
    """log P(a, e^t), the regularized lower incomplete gamma at x = e^t."""
    if t > _LOG_X_UNDERFLOW:
        p = float(gammainc(a, math.exp(t)))
        if p > 0.0:
            return math.log(p)
        # P underflowed although x did not; fall back to the series head.
        return a * t - math.exp(t) - float(gammaln(a + 1.0))
    return a * t - float(gammaln(a + 1.0))


def _log_gamma_quantile(a: float, u: float) -> float:
    """log of the Gamma(a, 1) quantile at ``u``, by bracketed root-finding in t = log x."""
    log_u = math.log(u)

    def f(t: float) -> float:
        return _log_lower_gamma_p(a, t) - log_u

    # x^a / Gamma(a+1) bounds P(a, x) from above, so this start is a lower bracket.
    lo = (log_u + float(gammaln(a + 1.0))) / a - 1.0
    while f(lo) > 0.0:
        lo -= 2.0 * abs(lo) + 1.0
    hi = max(lo, math.log(a)) + 1.0
    while f(hi) < 0.0:
        hi += 2.0 * (hi - lo)
    return brentq(f, lo, hi, xtol=INV_GAMMA_XTOL)


def build_sobol_table(spec: DesignSpec, K: Optional[int] = None) -> SobolDrawTable:
    """First ``K`` non-zero Sobol points mapped through inverse Gamma CDFs onto the simplex."""
    validate_design(spec)
    K = spec.K if K is None else K
    if K is None or K < 1:
        raise OutOfRangeError(f"Sobol table size K must be >= 1, got {K}")
    dim = spec.n_arms
    if dim > SOBOL_MAX_DIM:
        raise DimensionUnsupportedError(
            f"{dim} arms exceed the {SOBOL_MAX_DIM} dimensions of the Sobol direction numbers"
        )

    sampler = qmc.Sobol(d=dim, scramble=False)
    with warnings.catch_warnings():
        # Balance properties need 2^m points; callers pick K freely.
        warnings.simplefilter("ignore", UserWarning)
        points = sampler.random(K + 1)[1:]

    log_w = np.empty_like(points)
    for k in range(K):
        for m in range(dim):
            log_w[k, m] = _log_gamma_quantile(spec.alpha[m], float(points[k, m]))
    vectors = _normalize_log_simplex(log_w)
    logger.debug("Built Sobol table K=%d dim=%d", K, dim)
    return SobolDrawTable(vectors=vectors, alpha=tuple(spec.alpha))


def table_row_for(cluster_id: object, K: int, key: int) -> int:
    return int(stable_hash64(str(cluster_id), key=key) % K)


def assign_from_table(
    cluster_ids: Sequence[object],
    unit_counts: Sequence[int],
    table: SobolDrawTable,
    rng: RngStream,
) -> AssignmentMatrix:
    """Hash each cluster onto a table row, then draw its units from that row.

    Clusters may differ in size; shorter label rows are padded with
    ``PAD_LABEL``.  Identical ids always land on the same row.
    """
    if table.K == 0:
        raise EmptyTableError("Sobol draw table has no rows")
    if len(cluster_ids) != len(unit_counts):
        raise DegenerateGeometryError(
            f"{len(cluster_ids)} cluster ids but {len(unit_counts)} unit counts"
        )
    if len(cluster_ids) == 0:
        raise DegenerateGeometryError("no clusters to assign")
    counts = np.asarray(unit_counts, dtype=np.int64)
    if (counts < 1).any():
        raise DegenerateGeometryError("every cluster needs at least one unit")

    rows = np.array([table_row_for(cid, table.K, rng.seed) for cid in cluster_ids])
    probs = table.vectors[rows]
    u = rng.child("units").generator().random((len(cluster_ids), int(counts.max())))
    labels = _categorical(probs, u)
    labels[np.arange(labels.shape[1])[None, :] >= counts[:, None]] = PAD_LABEL
    return AssignmentMatrix.from_labels(
        labels, probs, cluster_ids=tuple(str(c) for c in cluster_ids)
    )


# ---------------------------------------------------------------------------
# Empirical check
# ---------------------------------------------------------------------------

def empirical_icc(assignment: AssignmentMatrix, arm: int) -> float:
    """One-way ANOVA intra-class correlation of the indicator 1{A = arm}.

    Unequal cluster sizes use the usual n0 = (N - sum n_j^2 / N) / (J - 1).
    The estimate is clamped to [-1/(n0 - 1), 1].
    """
    if not 0 <= arm <= assignment.M:
        raise IndexOutOfRangeError(f"arm {arm} outside 0..{assignment.M}")
    mask = assignment.unit_mask()
    sizes = mask.sum(axis=1).astype(float)
    J = assignment.n_clusters
    N = float(sizes.sum())
    if J < 2 or N - J < 1:
        raise DegenerateGeometryError(f"need >= 2 clusters and >= 2 units in some cluster (J={J}, N={N:.0f})")

    ind = ((assignment.labels == arm) & mask).astype(float)
    group_means = ind.sum(axis=1) / sizes
    grand = ind.sum() / N
    msb = float((sizes * (group_means - grand) ** 2).sum()) / (J - 1)
    within = np.where(mask, ind - group_means[:, None], 0.0)
    msw = float((within ** 2).sum()) / (N - J)
    n0 = (N - float((sizes ** 2).sum()) / N) / (J - 1)

    denom = msb + (n0 - 1.0) * msw
    if denom <= 0.0:
        raise DegenerateVarianceError(f"indicator for arm {arm} is constant over all units")
    icc = (msb - msw) / denom
    lower = -1.0 / (n0 - 1.0) if n0 > 1.0 else -1.0
    return float(min(1.0, max(lower, icc)))
