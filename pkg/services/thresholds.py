"""
Canonical numeric constants for randomization, estimation and simulation.

Single source of truth so tolerances stay consistent across the
randomizer, the OLS/sandwich code and the Monte Carlo harness.  Changing a
value here changes it everywhere.
"""

from typing import Tuple

# --- Randomization ------------------------------------------------------------

DIRICHLET_FLOOR = 1e-300       # keep draws off exact 0 so downstream logs stay finite
SIMPLEX_ATOL = 1e-12           # row-sum tolerance for probability vectors
INV_GAMMA_XTOL = 1e-12         # bracketed root-finding tolerance (log scale)
SOBOL_MAX_DIM = 21201          # dimensions covered by scipy's shipped direction numbers

# --- Estimation ---------------------------------------------------------------

RANK_TOL = 1e-10               # pivot / leading-pivot cutoff in ols_fit
Z_975 = 1.959964               # standard normal 97.5% quantile
CI_LEVEL = 0.95
VCOV_SYMMETRY_RTOL = 1e-8

# --- Simulation ---------------------------------------------------------------

RETRY_BUDGET = 5               # fresh-seed retries per degenerate iteration
DEFAULT_ITERATIONS = 1000
DEFAULT_BASE_SEED = 20190601

# Benchmark sweep axes.
RHO_U_GRID: Tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.8)
C_GRID: Tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)
SCALED_ALPHA_GRID: Tuple[float, ...] = (
    0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
    1.0, 2.0, 3.0, 10.0, 1000.0,
)
# Coarser design axis used for the qualitative design-selection checks.
REDUCED_SCALED_ALPHA_GRID: Tuple[float, ...] = (0.01, 0.1, 0.3, 0.6, 1.0, 3.0, 1000.0)

# Benchmark linear-in-means parameters with the interference multiplier c
# factored out of the slopes.
BENCHMARK_BETA: Tuple[float, ...] = (5.0, 7.5, 2.5)
BENCHMARK_DELTA_BASE: Tuple[Tuple[float, ...], ...] = (
    (0.5, -0.5),
    (1.0, -1.0),
    (2.5, -2.5),
)

# --- Design selection ---------------------------------------------------------

FLAT_RMSE_SPREAD = 0.05        # (max - min) / min below this -> "choice of alpha does not matter"
