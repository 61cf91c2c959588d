"""
RMSE-curve figures: RMSE against the intra-cluster correlation of treatment,
one line per rho_u, with a dashed vertical marker at each curve's minimum.

Rendered with matplotlib's Agg backend to SVG.  Date metadata and the SVG id
salt are pinned so identical inputs give byte-identical files.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from errors import EmptyInputError
from models import Estimator
from services.montecarlo import CellSummary, select_min_rmse

logger = logging.getLogger(__name__)

_LABELS = {
    Estimator.LINEAR_IN_MEANS: "Linear-in-means",
    Estimator.DIFFERENCE_IN_MEANS: "Difference-in-means",
}


def _matches(value: float, targets: Sequence[float], tol: float = 1e-12) -> bool:
    return any(abs(value - t) <= tol for t in targets)


def select_cells(
    cells: Sequence[CellSummary],
    c: float,
    rho_u_values: Optional[Sequence[float]] = None,
) -> List[CellSummary]:
    """Completed cells at interference level ``c`` (and the requested rho_u values)."""
    keep = [
        cell for cell in cells
        if cell.error is None
        and abs(cell.c - c) <= 1e-12
        and (rho_u_values is None or _matches(cell.rho_u, rho_u_values))
    ]
    if not keep:
        raise EmptyInputError(f"no cells at c={c} for rho_u in {list(rho_u_values or [])}")
    return keep


def curve_minima(
    cells: Sequence[CellSummary],
    c: float,
    rho_u_values: Optional[Sequence[float]],
    estimator: Estimator,
) -> Dict[float, float]:
    """rho_u -> rho_m of the minimum-RMSE design; where the dashed markers go."""
    optima = select_min_rmse(select_cells(cells, c, rho_u_values), estimator)
    return {rho_u: choice.rho_m for (rho_u, _), choice in optima.items()}


def plot_rmse_curves(
    cells: Sequence[CellSummary],
    c: float,
    rho_u_values: Optional[Sequence[float]],
    estimator: Estimator,
    path: Union[str, Path],
) -> Path:
    selected = select_cells(cells, c, rho_u_values)
    minima = curve_minima(selected, c, None, estimator)

    plt.rcParams["svg.hashsalt"] = "rmse-curves"
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        for rho_u in sorted({cell.rho_u for cell in selected}):
            curve = sorted((cl for cl in selected if cl.rho_u == rho_u), key=lambda cl: cl.rho_m)
            xs = [cl.rho_m for cl in curve]
            ys = [cl.summary(estimator).rmse for cl in curve]
            (line,) = ax.plot(xs, ys, marker="o", markersize=3, label=f"rho_u = {rho_u:g}")
            if rho_u in minima:
                ax.axvline(minima[rho_u], linestyle="--", linewidth=1.0, color=line.get_color())
        ax.set_xlabel("Intra-cluster correlation of treatment")
        ax.set_ylabel("RMSE")
        ax.set_title(f"{_LABELS[estimator]} (c = {c:g})")
        ax.set_xlim(0.0, 1.0)
        ax.legend(frameon=False)
        fig.tight_layout()

        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info("Wrote %s", out)
    return out
