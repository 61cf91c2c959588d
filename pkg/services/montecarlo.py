"""
Monte Carlo harness: per-cell simulation, grid sweeps, minimum-RMSE design
selection and the large-J difference-in-means bias oracle.

A cell is one (rho_u, c, (M+1)a) combination.  Every cell owns an
``RngStream`` derived from ``(base_seed, rho_u, c, scaled_alpha)`` and every
iteration derives its own child stream, so a cell's numbers do not depend
on which other cells share the sweep or on the thread schedule.

Aggregates pool over (iteration, contrast):

    bias     = mean(est - truth)
    rmse     = sqrt(mean((est - truth)^2))
    variance = rmse^2 - bias^2 (population variance of est - truth)
    mean_se  = mean(se)
    coverage = share of two-sided CIs containing the truth
"""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from errors import DegenerateDrawError, DegenerateVarianceError, EmptyInputError, OutOfRangeError
from models import (
    CiReference,
    DesignSpec,
    DgpParams,
    Estimator,
    VcovCorrection,
    validate_design,
)
from services.dgp import simulate_outcomes, true_haate
from services.estimate import critical_value, estimate_contrasts
from services.randomize import (
    assign_two_stage,
    empirical_icc,
    proportion_dispersion_ratio,
    treatment_icc,
)
from services.rng import RngStream
from services.thresholds import (
    C_GRID,
    DEFAULT_BASE_SEED,
    DEFAULT_ITERATIONS,
    FLAT_RMSE_SPREAD,
    RANK_TOL,
    REDUCED_SCALED_ALPHA_GRID,
    RETRY_BUDGET,
    RHO_U_GRID,
    SCALED_ALPHA_GRID,
)

logger = logging.getLogger(__name__)

ESTIMATORS: Tuple[Estimator, ...] = (Estimator.LINEAR_IN_MEANS, Estimator.DIFFERENCE_IN_MEANS)


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

class SweepGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho_u_values: Tuple[float, ...] = Field(default=RHO_U_GRID, min_length=1)
    c_values: Tuple[float, ...] = Field(default=C_GRID, min_length=1)
    scaled_alpha_values: Tuple[float, ...] = Field(default=SCALED_ALPHA_GRID, min_length=1)
    iterations: int = Field(default=DEFAULT_ITERATIONS, ge=1)
    base_seed: int = Field(default=DEFAULT_BASE_SEED, ge=0, lt=2 ** 64)

    @field_validator("rho_u_values")
    @classmethod
    def _rho_u_in_unit_interval(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        bad = [x for x in v if not 0.0 <= x < 1.0]
        if bad:
            raise ValueError(f"rho_u values must lie in [0, 1): {bad}")
        return v

    @field_validator("c_values")
    @classmethod
    def _c_nonnegative(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        bad = [x for x in v if x < 0]
        if bad:
            raise ValueError(f"c values must be >= 0: {bad}")
        return v

    @field_validator("scaled_alpha_values")
    @classmethod
    def _alpha_positive(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        bad = [x for x in v if not (math.isfinite(x) and x > 0)]
        if bad:
            raise ValueError(f"scaled alpha values must be > 0: {bad}")
        return v

    def cells(self) -> List[Tuple[float, float, float]]:
        """(rho_u, c, scaled_alpha) in lexicographic grid order."""
        return [
            (rho_u, c, sa)
            for rho_u in self.rho_u_values
            for c in self.c_values
            for sa in self.scaled_alpha_values
        ]

    @property
    def n_cells(self) -> int:
        return len(self.rho_u_values) * len(self.c_values) * len(self.scaled_alpha_values)


def default_grid(iterations: int = DEFAULT_ITERATIONS, base_seed: int = DEFAULT_BASE_SEED) -> SweepGrid:
    return SweepGrid(iterations=iterations, base_seed=base_seed)


def reduced_grid(iterations: int = 2000, base_seed: int = DEFAULT_BASE_SEED) -> SweepGrid:
    return SweepGrid(
        scaled_alpha_values=REDUCED_SCALED_ALPHA_GRID,
        iterations=iterations,
        base_seed=base_seed,
    )


def cell_stream(base_seed: int, rho_u: float, c: float, scaled_alpha: float) -> RngStream:
    return RngStream(base_seed).child("cell", float(rho_u), float(c), float(scaled_alpha))


CellKey = Tuple[float, float, float]


def cell_key(rho_u: float, c: float, scaled_alpha: float) -> CellKey:
    """Grid coordinates rounded so values read back from a cells table still match."""
    return (round(float(rho_u), 9), round(float(c), 9), round(float(scaled_alpha), 9))



# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorSummary:
    bias: float
    rmse: float
    mean_se: float
    coverage: float
    bias_mc_se: float = math.nan
    degraded_share: float = 0.0
    error_variance: float = math.nan

    @classmethod
    def empty(cls) -> "EstimatorSummary":
        return cls(math.nan, math.nan, math.nan, math.nan)

    @classmethod
    def from_draws(
        cls,
        errors: np.ndarray,
        ses: np.ndarray,
        covered: np.ndarray,
        degraded: np.ndarray,
    ) -> "EstimatorSummary":
        """Aggregate (iterations x contrasts) arrays of estimate - truth, SE and CI hits."""
        R = errors.shape[0]
        per_iter = errors.mean(axis=1)
        mc_se = float(per_iter.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
        return cls(
            bias=float(errors.mean()),
            rmse=float(math.sqrt((errors ** 2).mean())),
            mean_se=float(ses.mean()),
            coverage=float(covered.mean()),
            bias_mc_se=mc_se,
            degraded_share=float(degraded.mean()),
            error_variance=float(errors.var()),
        )


@dataclass(frozen=True)
class CellSummary:
    rho_u: float
    c: float
    scaled_alpha: float
    rho_m: float
    rho_m_dispersion: float
    truths: Tuple[float, ...]
    lm: EstimatorSummary
    dm: EstimatorSummary
    iterations_requested: int
    iterations_completed: int
    analytic_dm_bias: float = math.nan
    empirical_icc: float = math.nan
    error: Optional[str] = None

    def summary(self, estimator: Estimator) -> EstimatorSummary:
        return self.lm if estimator is Estimator.LINEAR_IN_MEANS else self.dm

    @property
    def key(self) -> CellKey:
        return cell_key(self.rho_u, self.c, self.scaled_alpha)

    @property
    def iterations_failed(self) -> int:
        return self.iterations_requested - self.iterations_completed

    @property
    def ok(self) -> bool:
        return self.error is None and self.iterations_failed == 0

    @property
    def completion(self) -> float:
        return self.iterations_completed / self.iterations_requested if self.iterations_requested else 0.0


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass
class _Draws:
    """Per-estimator accumulators, one row per completed iteration."""

    errors: List[np.ndarray] = field(default_factory=list)
    ses: List[np.ndarray] = field(default_factory=list)
    covered: List[np.ndarray] = field(default_factory=list)
    degraded: List[np.ndarray] = field(default_factory=list)

    def summarize(self) -> EstimatorSummary:
        if not self.errors:
            return EstimatorSummary.empty()
        return EstimatorSummary.from_draws(
            np.vstack(self.errors), np.vstack(self.ses), np.vstack(self.covered), np.vstack(self.degraded)
        )


def _one_iteration(
    spec: DesignSpec,
    params: DgpParams,
    stream: RngStream,
    z: float,
    correction: VcovCorrection,
    rank_tol: float,
):
    assignment = assign_two_stage(spec, stream.child("assign"))
    outcomes = simulate_outcomes(assignment, params, stream.child("outcomes"))
    fitted = {
        est: estimate_contrasts(
            assignment, outcomes, est, z=z, correction=correction, rank_tol=rank_tol
        )
        for est in ESTIMATORS
    }
    return assignment, fitted


def _iteration_with_retries(
    spec: DesignSpec,
    params: DgpParams,
    cell_rng: RngStream,
    index: int,
    z: float,
    correction: VcovCorrection,
    rank_tol: float,
    retry_budget: int,
):
    retrying = Retrying(
        stop=stop_after_attempt(1 + retry_budget),
        retry=retry_if_exception_type(DegenerateDrawError),
        before_sleep=before_sleep_log(logger, logging.DEBUG),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            stream = cell_rng.child("iteration", index, attempt.retry_state.attempt_number)
            return _one_iteration(spec, params, stream, z, correction, rank_tol)
    return None  # pragma: no cover


def run_cell(
    spec: DesignSpec,
    params: DgpParams,
    iterations: int = DEFAULT_ITERATIONS,
    base_seed: int = DEFAULT_BASE_SEED,
    correction: VcovCorrection = VcovCorrection.CR1,
    reference: CiReference = CiReference.NORMAL,
    rank_tol: float = RANK_TOL,
    retry_budget: int = RETRY_BUDGET,
) -> CellSummary:
    """Simulate one design cell ``iterations`` times and aggregate both estimators."""
    validate_design(spec)
    params.check()
    if iterations < 1:
        raise OutOfRangeError(f"iterations must be >= 1, got {iterations}")

    scaled_alpha = spec.scaled_alpha
    cell_rng = cell_stream(base_seed, params.rho_u, params.c, scaled_alpha)
    truths = np.array([true_haate(params, m) for m in range(1, spec.M + 1)])
    z = critical_value(reference, spec.J)

    draws: Dict[Estimator, _Draws] = {est: _Draws() for est in ESTIMATORS}
    iccs: List[float] = []
    completed = 0
    for i in range(iterations):
        try:
            assignment, fitted = _iteration_with_retries(
                spec, params, cell_rng, i, z, correction, rank_tol, retry_budget
            )
        except DegenerateDrawError as exc:
            logger.warning(
                "Iteration %d of cell (rho_u=%s, c=%s, scaled_alpha=%s) failed after %d retries: %s",
                i, params.rho_u, params.c, scaled_alpha, retry_budget, exc,
            )
            continue
        completed += 1
        for est, contrasts in fitted.items():
            estimates = np.array([ct.estimate for ct in contrasts])
            acc = draws[est]
            acc.errors.append(estimates - truths)
            acc.ses.append(np.array([ct.se for ct in contrasts]))
            acc.covered.append(np.array([ct.covers(t) for ct, t in zip(contrasts, truths)]))
            acc.degraded.append(np.array([ct.degraded for ct in contrasts]))
        try:
            iccs.append(empirical_icc(assignment, 0))
        except DegenerateVarianceError:
            pass

    rho_m = treatment_icc(spec.alpha_bar, spec.M)
    summary = CellSummary(
        rho_u=params.rho_u,
        c=params.c,
        scaled_alpha=scaled_alpha,
        rho_m=rho_m,
        rho_m_dispersion=proportion_dispersion_ratio(spec.alpha_bar, spec.M, spec.n),
        truths=tuple(float(t) for t in truths),
        lm=draws[Estimator.LINEAR_IN_MEANS].summarize(),
        dm=draws[Estimator.DIFFERENCE_IN_MEANS].summarize(),
        iterations_requested=iterations,
        iterations_completed=completed,
        analytic_dm_bias=float(np.mean([analytic_dm_bias(spec, params, m) for m in range(1, spec.M + 1)])),
        empirical_icc=float(np.mean(iccs)) if iccs else math.nan,
    )
    logger.info(
        "cell rho_u=%s c=%s scaled_alpha=%s: rho_m=%.3f empirical_icc=%.3f done=%d/%d "
        "rmse_lm=%.3f rmse_dm=%.3f",
        params.rho_u, params.c, scaled_alpha, rho_m, summary.empirical_icc,
        completed, iterations, summary.lm.rmse, summary.dm.rmse,
    )
    return summary


def _failed_cell(
    spec: DesignSpec, params: DgpParams, iterations: int, exc: BaseException
) -> CellSummary:
    try:
        rho_m = treatment_icc(spec.alpha_bar, spec.M)
        dispersion = proportion_dispersion_ratio(spec.alpha_bar, spec.M, spec.n)
        scaled_alpha = spec.scaled_alpha
    except Exception:
        rho_m = dispersion = scaled_alpha = math.nan
    return CellSummary(
        rho_u=params.rho_u,
        c=params.c,
        scaled_alpha=scaled_alpha,
        rho_m=rho_m,
        rho_m_dispersion=dispersion,
        truths=(),
        lm=EstimatorSummary.empty(),
        dm=EstimatorSummary.empty(),
        iterations_requested=iterations,
        iterations_completed=0,
        error=f"{type(exc).__name__}: {exc}",
    )


def sweep(
    grid: SweepGrid,
    template: DesignSpec,
    params: DgpParams,
    threads: int = 1,
    correction: VcovCorrection = VcovCorrection.CR1,
    reference: CiReference = CiReference.NORMAL,
    rank_tol: float = RANK_TOL,
    retry_budget: int = RETRY_BUDGET,
    on_cell: Optional[Callable[[int, CellSummary], None]] = None,
    skip: Collection[CellKey] = (),
) -> List[CellSummary]:
    """Run every grid cell; results come back in grid order whatever the schedule.

    ``template`` supplies (J, n, M); its alpha is replaced per cell.  ``params``
    supplies beta, delta_base and sigma2; rho_u and c come from the grid.
    A cell that raises is recorded with its ``error`` set and the sweep goes on.

    Cells whose ``cell_key`` is in ``skip`` are not run and not returned.
    ``on_cell`` is called on the calling thread as each cell finishes, with
    the cell's index among the cells actually run.
    """
    skip = set(skip)
    coords = [coord for coord in grid.cells() if cell_key(*coord) not in skip]
    jobs = [
        (
            template.with_scaled_alpha(sa),
            params.model_copy(update={"rho_u": rho_u, "c": c}),
        )
        for rho_u, c, sa in coords
    ]
    logger.info(
        "Sweep: %d cells x %d iterations on %d thread(s), %d already done",
        len(jobs), grid.iterations, threads, grid.n_cells - len(jobs),
    )

    def work(spec: DesignSpec, cell_params: DgpParams) -> CellSummary:
        return run_cell(
            spec, cell_params, grid.iterations, grid.base_seed,
            correction=correction, reference=reference,
            rank_tol=rank_tol, retry_budget=retry_budget,
        )

    results: List[Optional[CellSummary]] = [None] * len(jobs)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        fut_to_idx = {pool.submit(work, *job): i for i, job in enumerate(jobs)}
        try:
            for fut in concurrent.futures.as_completed(fut_to_idx):
                idx = fut_to_idx[fut]
                try:
                    results[idx] = fut.result()
                except Exception as exc:
                    logger.error("Cell %s failed: %s", coords[idx], exc)
                    results[idx] = _failed_cell(*jobs[idx], grid.iterations, exc)
                if on_cell is not None:
                    on_cell(idx, results[idx])
        except BaseException:
            # Interrupted or a callback failed: queued cells are abandoned.
            pool.shutdown(wait=False, cancel_futures=True)
            raise
    return [r for r in results if r is not None]


# ---------------------------------------------------------------------------
# Design selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignChoice:
    rho_u: float
    c: float
    scaled_alpha: float
    rho_m: float
    rmse: float
    flat: bool
    cell: CellSummary


def select_min_rmse(
    cells: Sequence[CellSummary],
    estimator: Estimator,
) -> Dict[Tuple[float, float], DesignChoice]:
    """Per (rho_u, c) stratum, the scaled alpha with the smallest RMSE.

    Ties go to the larger rho_m.  A stratum whose RMSE spread is below
    FLAT_RMSE_SPREAD of its minimum is flagged ``flat``.
    """
    strata: Dict[Tuple[float, float], List[CellSummary]] = {}
    for cell in cells:
        rmse = cell.summary(estimator).rmse
        if cell.error is not None or not math.isfinite(rmse):
            continue
        strata.setdefault((cell.rho_u, cell.c), []).append(cell)
    if not strata:
        raise EmptyInputError("no completed cells to select from")

    choices: Dict[Tuple[float, float], DesignChoice] = {}
    for key, members in strata.items():
        best = min(members, key=lambda s: (s.summary(estimator).rmse, -s.rho_m))
        rmses = [s.summary(estimator).rmse for s in members]
        lo, hi = min(rmses), max(rmses)
        flat = len(members) > 1 and (hi - lo) < FLAT_RMSE_SPREAD * lo
        if flat:
            logger.warning(
                "RMSE is flat across designs at rho_u=%s c=%s (%s): the choice of alpha hardly matters",
                key[0], key[1], estimator.value,
            )
        choices[key] = DesignChoice(
            rho_u=key[0],
            c=key[1],
            scaled_alpha=best.scaled_alpha,
            rho_m=best.rho_m,
            rmse=best.summary(estimator).rmse,
            flat=flat,
            cell=best,
        )
    return choices


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------

def conditional_proportion_mean(alpha_bar: float, M: int, n: int, own: bool) -> float:
    """E[p_j[l] | A_ji = m] under balanced Dirichlet-multinomial assignment.

    ``own`` selects l == m.  The unit itself counts toward its cluster's
    proportions.
    """
    hit = 1.0 if own else 0.0
    return (hit + (n - 1) * (alpha_bar + hit) / ((M + 1) * alpha_bar + 1.0)) / n


def analytic_dm_bias(spec: DesignSpec, params: DgpParams, m: int) -> float:
    """Large-J expectation of the difference in means minus the true HAATE for arm ``m``."""
    a = spec.alpha_bar
    truth = true_haate(params, m)
    M, n = spec.M, spec.n
    slopes = np.asarray(params.delta_base, dtype=float) * params.c

    def arm_mean(k: int) -> float:
        p = [conditional_proportion_mean(a, M, n, own=(l == k)) for l in range(1, M + 1)]
        return float(params.beta[k] + slopes[k] @ np.asarray(p))

    return (arm_mean(m) - arm_mean(0)) - truth
