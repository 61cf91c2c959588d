"""
Shared domain types used across the codebase.

Configuration-facing values (``DesignSpec``, ``DgpParams``) are frozen
pydantic models so they round-trip through JSON config files unchanged.
Array payloads (``AssignmentMatrix``, ``Contrast``) are frozen dataclasses
around numpy arrays; treat the arrays as read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from errors import (
    DegenerateGeometryError,
    EmptyArmsError,
    NonPositiveAlphaError,
    OutOfRangeError,
    UnbalancedAlphaUnsupportedError,
)
from services.thresholds import BENCHMARK_BETA, BENCHMARK_DELTA_BASE, SIMPLEX_ATOL

PAD_LABEL = -1  # label value for unused slots when clusters have unequal sizes


class AssignmentMode(str, Enum):
    TWO_STAGE_DIRICHLET = "two_stage_dirichlet"
    SOBOL_DIRICHLET = "sobol_dirichlet"


class Estimator(str, Enum):
    LINEAR_IN_MEANS = "lm"
    DIFFERENCE_IN_MEANS = "dm"


class CiReference(str, Enum):
    NORMAL = "normal"
    T = "t"


class VcovCorrection(str, Enum):
    CR0 = "CR0"
    CR1 = "CR1"


# ---------------------------------------------------------------------------
# Design and data-generating parameters
# ---------------------------------------------------------------------------

class DesignSpec(BaseModel):
    """Experiment geometry plus Dirichlet concentration per arm.

    Arms are ``0..M`` with ``0`` the control.  ``K`` is only meaningful in
    ``sobol_dirichlet`` mode (number of precomputed quasi-random draws).
    """

    model_config = ConfigDict(frozen=True)

    J: int
    n: int
    M: int
    alpha: Tuple[float, ...]
    mode: AssignmentMode = AssignmentMode.TWO_STAGE_DIRICHLET
    K: Optional[int] = None

    @classmethod
    def balanced(
        cls,
        J: int,
        n: int,
        M: int,
        alpha_bar: float,
        mode: AssignmentMode = AssignmentMode.TWO_STAGE_DIRICHLET,
        K: Optional[int] = None,
    ) -> "DesignSpec":
        return cls(J=J, n=n, M=M, alpha=(float(alpha_bar),) * (M + 1), mode=mode, K=K)

    @property
    def n_arms(self) -> int:
        return self.M + 1

    @property
    def is_balanced(self) -> bool:
        return len(set(self.alpha)) == 1

    @property
    def alpha_bar(self) -> float:
        if not self.is_balanced:
            raise UnbalancedAlphaUnsupportedError(
                f"alpha {self.alpha} is not balanced; alpha_bar is undefined"
            )
        return self.alpha[0]

    @property
    def scaled_alpha(self) -> float:
        """(M+1)·ᾱ, the axis the simulation grid is expressed on."""
        return self.n_arms * self.alpha_bar

    def with_scaled_alpha(self, scaled_alpha: float) -> "DesignSpec":
        alpha_bar = float(scaled_alpha) / self.n_arms
        return self.model_copy(update={"alpha": (alpha_bar,) * self.n_arms})


class DgpParams(BaseModel):
    """Linear-in-means parameters.

    ``delta_base[m][l-1]`` is the base slope of arm ``m`` on the proportion of
    arm ``l``; the effective slope multiplies it by ``c`` exactly once.
    """

    model_config = ConfigDict(frozen=True)

    beta: Tuple[float, ...]
    delta_base: Tuple[Tuple[float, ...], ...]
    c: float = 0.0
    sigma2: float = 1.0
    rho_u: float = 0.0

    @classmethod
    def benchmark(cls, c: float = 0.0, rho_u: float = 0.0, sigma2: float = 1.0) -> "DgpParams":
        return cls(beta=BENCHMARK_BETA, delta_base=BENCHMARK_DELTA_BASE, c=c, sigma2=sigma2, rho_u=rho_u)

    @property
    def M(self) -> int:
        return len(self.beta) - 1

    def check(self) -> None:
        """Raise the matching domain error unless the parameters are usable."""
        if len(self.beta) < 2:
            raise EmptyArmsError("beta needs an entry for control and at least one treatment")
        if len(self.delta_base) != len(self.beta) or any(len(r) != self.M for r in self.delta_base):
            raise DegenerateGeometryError(
                f"delta_base must be (M+1)x M = {len(self.beta)}x{self.M}"
            )
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise OutOfRangeError(f"sigma2 must be positive, got {self.sigma2}")
        if not 0.0 <= self.rho_u < 1.0:
            raise OutOfRangeError(f"rho_u must lie in [0, 1), got {self.rho_u}")
        if self.c < 0:
            raise OutOfRangeError(f"interference multiplier c must be >= 0, got {self.c}")


def validate_design(spec: DesignSpec) -> None:
    """Raise the matching domain error unless every DesignSpec invariant holds."""
    if spec.M < 1:
        raise EmptyArmsError(f"need at least one non-control arm, got M={spec.M}")
    if spec.J < 2 or spec.n < 2:
        raise DegenerateGeometryError(
            f"need J >= 2 clusters and n >= 2 units per cluster, got J={spec.J}, n={spec.n}"
        )
    if len(spec.alpha) != spec.n_arms:
        raise DegenerateGeometryError(
            f"alpha has {len(spec.alpha)} components, expected M+1 = {spec.n_arms}"
        )
    bad = [a for a in spec.alpha if not (math.isfinite(a) and a > 0)]
    if bad:
        raise NonPositiveAlphaError(f"Dirichlet concentrations must be > 0, got {bad}")
    if spec.mode is AssignmentMode.SOBOL_DIRICHLET and (spec.K is None or spec.K < 1):
        raise OutOfRangeError(f"sobol_dirichlet mode needs K >= 1, got K={spec.K}")


# ---------------------------------------------------------------------------
# Realized assignments and contrasts
# ---------------------------------------------------------------------------

def proportions_from_labels(labels: np.ndarray, M: int) -> np.ndarray:
    """Per-cluster arm frequencies p_{j[m]}, counting the unit itself.

    Padding slots (``PAD_LABEL``) are excluded from both numerator and
    denominator.
    """
    labels = np.asarray(labels)
    counts = (labels[:, :, None] == np.arange(M + 1)).sum(axis=1)
    sizes = (labels != PAD_LABEL).sum(axis=1, keepdims=True)
    return counts / sizes


def check_probability_rows(probs: np.ndarray, n_clusters: int) -> None:
    """Each row must be a probability vector: nonnegative, summing to 1 within SIMPLEX_ATOL."""
    if probs.ndim != 2 or probs.shape[0] != n_clusters or probs.shape[1] < 2:
        raise DegenerateGeometryError(
            f"need one probability vector over >= 2 arms per cluster, got shape {probs.shape} for {n_clusters} clusters"
        )
    if not np.all(np.isfinite(probs)) or (probs < 0).any():
        raise OutOfRangeError("cluster probability vectors must be finite and nonnegative")
    drift = np.abs(probs.sum(axis=1) - 1.0)
    if (drift > SIMPLEX_ATOL).any():
        j = int(drift.argmax())
        raise OutOfRangeError(f"cluster {j} probabilities sum to {probs[j].sum():.15g}, not 1")


@dataclass(frozen=True)
class AssignmentMatrix:
    """Treatment labels per (cluster, unit) with the probability vectors behind them.

    ``labels`` is J x n_max; clusters smaller than n_max are padded with
    ``PAD_LABEL``.  The simulator always produces equal sizes.
    """

    labels: np.ndarray
    cluster_probs: np.ndarray
    proportions: np.ndarray
    cluster_ids: Optional[Tuple[str, ...]] = None

    @classmethod
    def from_labels(
        cls,
        labels: np.ndarray,
        cluster_probs: np.ndarray,
        cluster_ids: Optional[Tuple[str, ...]] = None,
    ) -> "AssignmentMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        cluster_probs = np.asarray(cluster_probs, dtype=float)
        check_probability_rows(cluster_probs, labels.shape[0])
        M = cluster_probs.shape[1] - 1
        return cls(
            labels=labels,
            cluster_probs=cluster_probs,
            proportions=proportions_from_labels(labels, M),
            cluster_ids=cluster_ids,
        )

    @property
    def n_clusters(self) -> int:
        return self.labels.shape[0]

    @property
    def M(self) -> int:
        return self.cluster_probs.shape[1] - 1

    @property
    def unit_counts(self) -> np.ndarray:
        return (self.labels != PAD_LABEL).sum(axis=1)

    @property
    def is_padded(self) -> bool:
        return bool((self.labels == PAD_LABEL).any())

    def unit_mask(self) -> np.ndarray:
        return self.labels != PAD_LABEL

    def arm_counts(self) -> np.ndarray:
        """Pooled number of units per arm."""
        return np.array([(self.labels == m).sum() for m in range(self.M + 1)])


@dataclass(frozen=True)
class Contrast:
    """One HAATE estimate Ψ(m̄, 0̄) with its symmetric confidence interval.

    ``degraded`` is set when the linear-in-means fit had to drop δ_{m,m}, so
    the reported value is effectively the difference-in-means form.
    """

    arm: int
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    estimator: Estimator
    degraded: bool = False

    @classmethod
    def from_estimate(
        cls,
        arm: int,
        estimate: float,
        se: float,
        z: float,
        estimator: Estimator,
        degraded: bool = False,
    ) -> "Contrast":
        half = z * se
        return cls(arm, estimate, se, estimate - half, estimate + half, estimator, degraded)

    def covers(self, truth: float) -> bool:
        return self.ci_lo <= truth <= self.ci_hi
