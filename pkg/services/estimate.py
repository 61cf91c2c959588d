"""
OLS fits, cluster-robust variances and HAATE contrasts.

Two layouts share one fitting path:

  * linear-in-means (LM): Beta(m) = 1{A=m} for every arm plus
    Delta(m, l) = p_j[l] * 1{A=m} for every arm m and treated arm l;
  * difference-in-means (DM): the Beta columns only.

Neither has a global intercept.  Under near-cluster randomization the
Delta(m, m) columns become (almost) collinear with Beta(m); ``ols_fit``
resolves that with a pivoted QR in which the Beta block is factored first,
so only Delta columns are ever dropped for collinearity.  A Beta column is
dropped only when its arm has no units at all.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, stats

from errors import (
    AllColumnsDroppedError,
    DegenerateGeometryError,
    IndexOutOfRangeError,
    MissingBetaColumnError,
    NonFiniteInputError,
    SingularGramError,
    ZeroDenominatorError,
)
from models import AssignmentMatrix, CiReference, Contrast, Estimator, VcovCorrection
from services.dgp import OutcomeMatrix
from services.thresholds import CI_LEVEL, RANK_TOL, VCOV_SYMMETRY_RTOL, Z_975

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class ColumnTag:
    kind: str          # "beta" | "delta"
    m: int
    l: int = 0         # treated arm whose proportion multiplies the column (delta only)

    @classmethod
    def beta(cls, m: int) -> "ColumnTag":
        return cls("beta", m)

    @classmethod
    def delta(cls, m: int, l: int) -> "ColumnTag":
        return cls("delta", m, l)

    @property
    def is_beta(self) -> bool:
        return self.kind == "beta"

    def __str__(self) -> str:
        return f"beta_{self.m}" if self.is_beta else f"delta_{self.m}_{self.l}"

    @classmethod
    def parse(cls, text: str) -> "ColumnTag":
        parts = text.split("_")
        if parts[0] == "beta" and len(parts) == 2:
            return cls.beta(int(parts[1]))
        if parts[0] == "delta" and len(parts) == 3:
            return cls.delta(int(parts[1]), int(parts[2]))
        raise ValueError(f"not a column tag: {text!r}")


@dataclass(frozen=True)
class DesignMatrix:
    """Unit-level regressors, one row per non-padding unit in row-major (cluster, unit) order."""

    x: np.ndarray
    column_tags: Tuple[ColumnTag, ...]
    cluster_index: np.ndarray
    unit_mask: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.x.shape[0])

    def response(self, y: Union[OutcomeMatrix, np.ndarray]) -> np.ndarray:
        """Flatten an outcome matrix into the row order of ``x``."""
        values = y.y if isinstance(y, OutcomeMatrix) else np.asarray(y, dtype=float)
        if values.ndim == 1:
            return values
        if values.shape != self.unit_mask.shape:
            raise DegenerateGeometryError(
                f"outcomes have shape {values.shape}, assignment has {self.unit_mask.shape}"
            )
        return values[self.unit_mask]


def _beta_block(assignment: AssignmentMatrix, M: int):
    mask = assignment.unit_mask()
    arms = assignment.labels[mask]
    clusters = np.nonzero(mask)[0]
    onehot = (arms[:, None] == np.arange(M + 1)).astype(float)
    return mask, clusters, onehot


def build_dm_matrix(assignment: AssignmentMatrix, M: Optional[int] = None) -> DesignMatrix:
    M = assignment.M if M is None else M
    mask, clusters, onehot = _beta_block(assignment, M)
    tags = tuple(ColumnTag.beta(m) for m in range(M + 1))
    return DesignMatrix(x=onehot, column_tags=tags, cluster_index=clusters, unit_mask=mask)


def build_lm_matrix(assignment: AssignmentMatrix, M: Optional[int] = None) -> DesignMatrix:
    M = assignment.M if M is None else M
    mask, clusters, onehot = _beta_block(assignment, M)
    p = assignment.proportions[clusters]
    # delta[:, m, l-1] = 1{A=m} * p_j[l]
    delta = onehot[:, :, None] * p[:, None, 1:]
    x = np.hstack([onehot, delta.reshape(len(clusters), -1)])
    tags = tuple(ColumnTag.beta(m) for m in range(M + 1)) + tuple(
        ColumnTag.delta(m, l) for m in range(M + 1) for l in range(1, M + 1)
    )
    return DesignMatrix(x=x, column_tags=tags, cluster_index=clusters, unit_mask=mask)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    retained: Tuple[ColumnTag, ...]
    dropped: Tuple[ColumnTag, ...]
    residuals: np.ndarray
    x_retained: np.ndarray
    cluster_index: np.ndarray
    n_clusters: int
    vcov: Optional[np.ndarray] = None
    correction: VcovCorrection = VcovCorrection.CR1

    def position(self, tag: ColumnTag) -> Optional[int]:
        try:
            return self.retained.index(tag)
        except ValueError:
            return None

    def coef(self, tag: ColumnTag) -> Optional[float]:
        k = self.position(tag)
        return None if k is None else float(self.coefficients[k])

    @property
    def is_lm(self) -> bool:
        return any(not t.is_beta for t in self.retained + self.dropped)


def _retained_prefix(diag: np.ndarray, cutoff: float) -> int:
    return int((np.abs(diag) >= cutoff).sum())


def _select_columns(x: np.ndarray, tags: Sequence[ColumnTag], tol: float) -> List[int]:
    """Column indices that survive the protected pivoted QR, in original order."""
    beta_idx = [k for k, t in enumerate(tags) if t.is_beta]
    delta_idx = [k for k, t in enumerate(tags) if not t.is_beta]
    lead = float(np.linalg.norm(x, axis=0).max()) if x.size else 0.0
    if lead == 0.0:
        return []
    cutoff = tol * lead

    kept: List[int] = []
    q_beta = np.zeros((x.shape[0], 0))
    if beta_idx:
        q, r, piv = linalg.qr(x[:, beta_idx], mode="economic", pivoting=True)
        rank = _retained_prefix(np.diag(r), cutoff)
        kept.extend(beta_idx[k] for k in piv[:rank])
        q_beta = q[:, :rank]
    if delta_idx:
        d = x[:, delta_idx]
        d = d - q_beta @ (q_beta.T @ d)
        _, r, piv = linalg.qr(d, mode="economic", pivoting=True)
        rank = _retained_prefix(np.diag(r), cutoff)
        kept.extend(delta_idx[k] for k in piv[:rank])
    return sorted(kept)


def ols_fit(
    design: DesignMatrix,
    y: Union[OutcomeMatrix, np.ndarray],
    tol: float = RANK_TOL,
    correction: VcovCorrection = VcovCorrection.CR1,
) -> FitResult:
    """Least squares on the columns of ``design`` that survive the rank check.

    The returned fit carries its cluster-robust covariance.
    """
    resp = design.response(y)
    if resp.shape[0] != design.n_rows:
        raise DegenerateGeometryError(f"{resp.shape[0]} outcomes for {design.n_rows} design rows")
    if not (np.all(np.isfinite(design.x)) and np.all(np.isfinite(resp))):
        raise NonFiniteInputError("design matrix or outcomes contain NaN or inf")

    keep = _select_columns(design.x, design.column_tags, tol)
    if not keep:
        raise AllColumnsDroppedError("every column fell below the rank tolerance")
    retained = tuple(design.column_tags[k] for k in keep)
    dropped = tuple(t for t in design.column_tags if t not in retained)
    if dropped:
        logger.debug("ols_fit dropped %s", ", ".join(str(t) for t in dropped))

    x_r = design.x[:, keep]
    coef, *_ = linalg.lstsq(x_r, resp)
    fit = FitResult(
        coefficients=coef,
        retained=retained,
        dropped=dropped,
        residuals=resp - x_r @ coef,
        x_retained=x_r,
        cluster_index=design.cluster_index,
        n_clusters=int(np.unique(design.cluster_index).size),
    )
    return replace(fit, vcov=cluster_robust_vcov(fit, correction), correction=correction)


def cluster_robust_vcov(fit: FitResult, correction: VcovCorrection = VcovCorrection.CR1) -> np.ndarray:
    """(X'X)^-1 [sum_j X_j' e_j e_j' X_j] (X'X)^-1 over the retained columns."""
    x = fit.x_retained
    groups, inverse = np.unique(fit.cluster_index, return_inverse=True)
    J = groups.size
    N, P = x.shape
    if J < 2:
        raise DegenerateGeometryError(f"cluster-robust variance needs >= 2 clusters, got {J}")

    scores = np.zeros((J, P))
    np.add.at(scores, inverse, x * fit.residuals[:, None])
    meat = scores.T @ scores

    try:
        factor = linalg.cho_factor(x.T @ x)
    except linalg.LinAlgError as exc:
        raise SingularGramError(f"X'X is not positive definite: {exc}") from exc
    half = linalg.cho_solve(factor, meat)
    vcov = linalg.cho_solve(factor, half.T).T

    if correction is VcovCorrection.CR1:
        if N <= P:
            raise SingularGramError(f"CR1 needs more observations ({N}) than columns ({P})")
        vcov = vcov * (J / (J - 1.0)) * ((N - 1.0) / (N - P))

    scale = float(np.abs(vcov).max())
    if float(np.abs(vcov - vcov.T).max()) > VCOV_SYMMETRY_RTOL * scale:
        raise SingularGramError("sandwich lost symmetry; X'X is too ill-conditioned to invert reliably")
    return (vcov + vcov.T) / 2.0


# ---------------------------------------------------------------------------
# Contrasts
# ---------------------------------------------------------------------------

def critical_value(
    reference: CiReference = CiReference.NORMAL,
    n_clusters: Optional[int] = None,
    level: float = CI_LEVEL,
) -> float:
    """Two-sided critical value; the t reference uses J - 1 degrees of freedom."""
    if reference is CiReference.NORMAL:
        return Z_975 if level == CI_LEVEL else float(stats.norm.ppf(0.5 + level / 2.0))
    if n_clusters is None or n_clusters < 2:
        raise DegenerateGeometryError("t critical value needs the number of clusters (>= 2)")
    return float(stats.t.ppf(0.5 + level / 2.0, n_clusters - 1))


def _contrast_se(fit: FitResult, weights: Dict[ColumnTag, float]) -> float:
    lam = np.zeros(len(fit.retained))
    for tag, w in weights.items():
        lam[fit.position(tag)] = w
    vcov = fit.vcov if fit.vcov is not None else cluster_robust_vcov(fit, fit.correction)
    var = float(lam @ vcov @ lam)
    return math.sqrt(max(var, 0.0))


def _require_betas(fit: FitResult, m: int) -> None:
    if m < 1:
        raise IndexOutOfRangeError(f"contrast arm must be >= 1, got {m}")
    for arm in (0, m):
        if fit.position(ColumnTag.beta(arm)) is None:
            raise MissingBetaColumnError(f"beta_{arm} was not estimated (no units on arm {arm})")


def haate_contrast_lm(fit: FitResult, m: int, z: float = Z_975) -> Contrast:
    """(beta_m + delta_mm) - beta_0; falls back to beta_m - beta_0 when delta_mm was dropped."""
    _require_betas(fit, m)
    weights = {ColumnTag.beta(m): 1.0, ColumnTag.beta(0): -1.0}
    own = ColumnTag.delta(m, m)
    degraded = fit.position(own) is None
    if not degraded:
        weights[own] = 1.0
    estimate = sum(w * fit.coef(tag) for tag, w in weights.items())
    return Contrast.from_estimate(
        m, float(estimate), _contrast_se(fit, weights), z, Estimator.LINEAR_IN_MEANS, degraded
    )


def haate_contrast_dm(fit: FitResult, m: int, z: float = Z_975) -> Contrast:
    _require_betas(fit, m)
    weights = {ColumnTag.beta(m): 1.0, ColumnTag.beta(0): -1.0}
    estimate = fit.coef(ColumnTag.beta(m)) - fit.coef(ColumnTag.beta(0))
    return Contrast.from_estimate(
        m, float(estimate), _contrast_se(fit, weights), z, Estimator.DIFFERENCE_IN_MEANS
    )


def ratio_effect(
    mean_t: float,
    mean_c: float,
    var_t: float,
    var_c: float,
    cov_tc: float,
) -> Tuple[float, float]:
    """mean_t / mean_c with its delta-method standard error."""
    if mean_c == 0:
        raise ZeroDenominatorError("control mean is zero; ratio effect undefined")
    ratio = mean_t / mean_c
    # |r| sqrt(vt/mt^2 + vc/mc^2 - 2 cov/(mt mc)), rearranged so mean_t = 0 is allowed.
    var = (var_t - 2.0 * ratio * cov_tc + ratio * ratio * var_c) / (mean_c * mean_c)
    return ratio, math.sqrt(max(var, 0.0))


def haate_ratio_dm(fit: FitResult, m: int) -> Tuple[float, float]:
    """beta_m / beta_0 from a difference-in-means fit, SE from its cluster-robust covariance."""
    _require_betas(fit, m)
    i, k = fit.position(ColumnTag.beta(m)), fit.position(ColumnTag.beta(0))
    v = fit.vcov
    return ratio_effect(fit.coefficients[i], fit.coefficients[k], v[i, i], v[k, k], v[i, k])


def estimate_contrasts(
    assignment: AssignmentMatrix,
    outcomes: Union[OutcomeMatrix, np.ndarray],
    estimator: Estimator,
    z: Optional[float] = None,
    reference: CiReference = CiReference.NORMAL,
    correction: VcovCorrection = VcovCorrection.CR1,
    rank_tol: float = RANK_TOL,
) -> List[Contrast]:
    """Fit one estimator and return its Psi(m, 0) contrast for every treated arm."""
    if estimator is Estimator.LINEAR_IN_MEANS:
        design, contrast = build_lm_matrix(assignment), haate_contrast_lm
    else:
        design, contrast = build_dm_matrix(assignment), haate_contrast_dm
    fit = ols_fit(design, outcomes, tol=rank_tol, correction=correction)
    if z is None:
        z = critical_value(reference, fit.n_clusters)
    return [contrast(fit, m, z) for m in range(1, assignment.M + 1)]
