"""
Computational services for two-stage interference designs.

Submodules: ``rng`` (seeded streams), ``randomize`` (Dirichlet-multinomial
and Sobol assignment), ``dgp`` (linear-in-means outcomes), ``estimate``
(OLS, cluster-robust variance, HAATE contrasts), ``montecarlo`` (sweeps and
design selection), ``exports`` (CSV/JSON interchange) and ``figures``.

Only the canonical thresholds are imported eagerly; ``models`` depends on
them, so pulling the heavier submodules in here would create an import cycle.
"""

from . import thresholds

__all__ = [
    'thresholds',
]
