"""Check benchmark simulation rows and design-selection shapes.

Runs the handful of benchmark cells with known targets (cluster pole
without interference, unit pole under random effects and under
interference), cross-checks the difference-in-means bias against the
large-J closed form, and sweeps a reduced design axis to check where the
minimum-RMSE design sits.  Writes a markdown table to
eval/reports/benchmark_check_<timestamp>.md plus a JSON sidecar.

Run:  python eval/benchmark_check.py [--iterations 1000] [--selection-iterations 2000]
                                        [--threads 8] [--skip-selection]
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Tuple

REPO_ROOT = Path(__file__).resolve().parent.parent
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from models import DesignSpec, DgpParams, Estimator  # noqa: E402
from services.montecarlo import (  # noqa: E402
    CellSummary,
    SweepGrid,
    run_cell,
    select_min_rmse,
    sweep,
)
from services.thresholds import DEFAULT_BASE_SEED, REDUCED_SCALED_ALPHA_GRID  # noqa: E402

TEMPLATE = DesignSpec.balanced(J=100, n=50, M=2, alpha_bar=1.0)
CLUSTER_POLE = min(REDUCED_SCALED_ALPHA_GRID)
UNIT_POLE = max(REDUCED_SCALED_ALPHA_GRID)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    observed: float
    target: str
    passed: bool
    note: str = ""


def _within(name: str, observed: float, center: float, tol: float, note: str = "") -> Check:
    ok = math.isfinite(observed) and abs(observed - center) <= tol
    return Check(name, observed, f"{center:g} ± {tol:g}", ok, note)


def _between(name: str, observed: float, lo: float, hi: float, note: str = "") -> Check:
    ok = math.isfinite(observed) and lo <= observed <= hi
    return Check(name, observed, f"[{lo:g}, {hi:g}]", ok, note)


def _below(name: str, observed: float, limit: float, note: str = "") -> Check:
    ok = math.isfinite(observed) and observed <= limit
    return Check(name, observed, f"<= {limit:g}", ok, note)


def _cell(rho_u: float, c: float, scaled_alpha: float, iterations: int, seed: int) -> CellSummary:
    print(f"[benchmark_check] cell rho_u={rho_u:g} c={c:g} scaled_alpha={scaled_alpha:g} "
          f"x {iterations}", file=sys.stderr)
    return run_cell(
        TEMPLATE.with_scaled_alpha(scaled_alpha),
        DgpParams.benchmark(c=c, rho_u=rho_u),
        iterations=iterations,
        base_seed=seed,
    )


def row_checks(iterations: int, seed: int) -> Tuple[List[Check], List[CellSummary]]:
    checks: List[Check] = []
    cells: List[CellSummary] = []

    pole = _cell(0.0, 0.0, 0.001, iterations, seed)
    cells.append(pole)
    checks += [
        _within("cluster pole, no interference: DM RMSE", pole.dm.rmse, 0.034, 0.005),
        _within("cluster pole, no interference: DM coverage", pole.dm.coverage, 0.957,
                4 * math.sqrt(0.95 * 0.05 / iterations)),
        _below("cluster pole, no interference: |DM bias|", abs(pole.dm.bias), 0.01),
    ]

    effects = _cell(0.5, 0.0, 1000.0, iterations, seed)
    cells.append(effects)
    checks += [
        _within("unit pole, rho_u=0.5: DM RMSE", effects.dm.rmse, 0.049, 0.006),
        _within("unit pole, rho_u=0.5: LM RMSE", effects.lm.rmse, 1.803, 0.25),
        _between("unit pole, rho_u=0.5: LM coverage", effects.lm.coverage, 0.93, 0.97),
    ]

    for c in (0.5, 1.0):
        cell = _cell(0.0, c, 1000.0, iterations, seed)
        cells.append(cell)
        checks += [
            _between(f"unit pole, c={c:g}: LM coverage", cell.lm.coverage, 0.93, 0.97),
            _below(
                f"unit pole, c={c:g}: DM coverage", cell.dm.coverage, 0.05,
                "intervals centred on the biased estimate miss both arms",
            ),
            _below(
                f"unit pole, c={c:g}: |DM bias - closed form| in MC SEs",
                abs(cell.dm.bias - cell.analytic_dm_bias) / cell.dm.bias_mc_se, 4.0,
                f"closed form {cell.analytic_dm_bias:.3f}, simulated {cell.dm.bias:.3f}",
            ),
        ]
    return checks, cells


def selection_checks(iterations: int, seed: int, threads: int) -> Tuple[List[Check], Dict[str, Any]]:
    strata = [(0.1, 0.1), (0.3, 0.1), (0.5, 0.1), (0.3, 0.0), (0.5, 0.0), (0.0, 1.0), (0.3, 1.0)]
    grid = SweepGrid(
        rho_u_values=tuple(sorted({r for r, _ in strata})),
        c_values=tuple(sorted({c for _, c in strata})),
        scaled_alpha_values=REDUCED_SCALED_ALPHA_GRID,
        iterations=iterations,
        base_seed=seed,
    )
    print(f"[benchmark_check] design selection: {grid.n_cells} cells x {iterations} "
          f"on {threads} thread(s)", file=sys.stderr)
    choices = select_min_rmse(sweep(grid, TEMPLATE, DgpParams.benchmark(), threads=threads),
                              Estimator.DIFFERENCE_IN_MEANS)
    optimum = {key: choices[key].scaled_alpha for key in strata if key in choices}

    checks: List[Check] = []
    low_c = [choices[(r, 0.1)].rho_m for r in (0.1, 0.3, 0.5)]
    for (r, c) in [(0.1, 0.1), (0.3, 0.1), (0.5, 0.1)]:
        sa = optimum[(r, c)]
        checks.append(Check(
            f"c=0.1, rho_u={r:g}: interior optimum", sa,
            "strictly between the poles", CLUSTER_POLE < sa < UNIT_POLE,
        ))
    checks.append(Check(
        "c=0.1: optimal rho_m decreasing in rho_u", low_c[0] - low_c[2],
        ">= 0 (rho_u 0.1 vs 0.5)", low_c[0] >= low_c[1] >= low_c[2],
        ", ".join(f"{x:.3f}" for x in low_c),
    ))
    for r in (0.3, 0.5):
        sa = optimum[(r, 0.0)]
        checks.append(Check(f"c=0, rho_u={r:g}: unit-pole optimum", sa, f"= {UNIT_POLE:g}", sa == UNIT_POLE))
    for r in (0.0, 0.3):
        sa = optimum[(r, 1.0)]
        checks.append(Check(f"c=1, rho_u={r:g}: cluster-pole optimum", sa, f"= {CLUSTER_POLE:g}", sa == CLUSTER_POLE))

    detail = {f"rho_u={r:g},c={c:g}": {"scaled_alpha": sa, "rho_m": choices[(r, c)].rho_m,
                                        "rmse": choices[(r, c)].rmse, "flat": choices[(r, c)].flat}
              for (r, c), sa in optimum.items()}
    return checks, detail


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def to_markdown(checks: List[Check], iterations: int, selection_iterations: int, seed: int) -> str:
    lines: List[str] = []
    passed = sum(c.passed for c in checks)
    lines.append(f"# Benchmark check: {passed}/{len(checks)} checks pass")
    lines.append("")
    lines.append(f"J={TEMPLATE.J}, n={TEMPLATE.n}, M={TEMPLATE.M}; {iterations} iterations per row cell, "
                 f"{selection_iterations} per selection cell; base seed {seed}.")
    lines.append("")
    lines.append("| check | observed | target | pass | note |")
    lines.append("|---|---|---|---|---|")
    for c in checks:
        lines.append(f"| {c.name} | {c.observed:.4g} | {c.target} | {'yes' if c.passed else 'NO'} | {c.note} |")
    lines.append("")
    lines.append("Coverage is the share of two-sided intervals containing the true HAATE, pooled over both contrasts.")
    return "\n".join(lines)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=1000, help="Iterations for the pinned table rows")
    ap.add_argument("--selection-iterations", type=int, default=2000,
                    help="Iterations per cell of the design-selection sweep")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--seed", type=int, default=DEFAULT_BASE_SEED)
    ap.add_argument("--skip-selection", action="store_true", help="Only run the pinned table rows")
    ap.add_argument("--out", default=None,
                    help="Markdown output path (default: eval/reports/benchmark_check_<ts>.md)")
    args = ap.parse_args()

    t0 = time.time()
    checks, cells = row_checks(args.iterations, args.seed)
    selection: Dict[str, Any] = {}
    if not args.skip_selection:
        more, selection = selection_checks(args.selection_iterations, args.seed, args.threads)
        checks += more
    elapsed = time.time() - t0

    if args.out:
        out_path = Path(args.out)
    else:
        reports_dir = REPO_ROOT / "eval" / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        ts = datetime.now().strftime("%Y%m%d_%H%M%S")
        out_path = reports_dir / f"benchmark_check_{ts}.md"

    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(to_markdown(checks, args.iterations, args.selection_iterations, args.seed),
                        encoding="utf-8")

    json_path = out_path.with_suffix(".json")
    json_path.write_text(
        json.dumps(
            {
                "elapsed_seconds": round(elapsed, 2),
                "iterations": args.iterations,
                "selection_iterations": args.selection_iterations,
                "seed": args.seed,
                "checks": [asdict(c) for c in checks],
                "cells": [asdict(c) for c in cells],
                "selection": selection,
            },
            indent=2,
            default=str,
        ),
        encoding="utf-8",
    )

    failed = [c for c in checks if not c.passed]
    print(f"[benchmark_check] wrote {out_path} ({len(checks) - len(failed)}/{len(checks)} pass, "
          f"{elapsed:.1f}s)", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
