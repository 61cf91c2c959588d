"""Command-line front end for two-stage interference designs.

Subcommands:
  simulate       run a config-driven Monte Carlo sweep, write the cells table
  select-design  report the minimum-RMSE design for one (rho_u, c) stratum
  assign         draw a two-stage or Sobol-table assignment and write it out
  outcomes       simulate outcomes for a saved assignment CSV
  fit            LM or DM contrasts (and DM ratios) from an outcomes CSV
  plot           RMSE-curve SVGs from a cells table

simulate rewrites the cells table after every finished cell; rerunning with
the same settings skips those cells (--fresh starts over).

Exit codes: 0 ok, 1 at least one failed sweep cell, 2 config / usage /
selection error, 3 I/O error.

Run:  python cli.py simulate configs/default.json [--iterations 50] [--threads 8]
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

import config
from config import OutputFormat, RunConfig, load_run_config
from errors import ConfigError, InterferenceDesignError
from models import AssignmentMode, CiReference, DesignSpec, DgpParams, Estimator, VcovCorrection
from services import exports
from services.dgp import simulate_outcomes
from services.estimate import (
    build_dm_matrix,
    build_lm_matrix,
    critical_value,
    haate_contrast_dm,
    haate_contrast_lm,
    haate_ratio_dm,
    ols_fit,
)
from services.figures import plot_rmse_curves
from services.montecarlo import CellSummary, cell_key, select_min_rmse, sweep
from services.randomize import (
    alpha_for_icc,
    assign_from_table,
    assign_two_stage,
    build_sobol_table,
    empirical_icc,
    treatment_icc,
)
from services.rng import RngStream

logger = logging.getLogger("interference_cli")

EXIT_OK = 0
EXIT_FAILED_CELL = 1
EXIT_USAGE = 2
EXIT_IO = 3

RUN_SETTINGS_FILE = "run_config.json"  # effective settings of the run that wrote the cells table

_ESTIMATOR_CHOICES = {"lm": Estimator.LINEAR_IN_MEANS, "dm": Estimator.DIFFERENCE_IN_MEANS}


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _float_key_match(value: float, target: float) -> bool:
    return abs(value - target) <= 1e-9


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _summary_frame(cells: Sequence[CellSummary]):
    """Summary rows: the cells-table row of each stratum's optimum, per estimator."""
    frame = exports.cells_to_frame(cells)
    picked = []
    for est in (Estimator.LINEAR_IN_MEANS, Estimator.DIFFERENCE_IN_MEANS):
        try:
            choices = select_min_rmse(cells, est)
        except InterferenceDesignError:
            continue
        for choice in choices.values():
            idx = next(i for i, cell in enumerate(cells) if cell is choice.cell)
            row = frame.iloc[idx].copy()
            row["estimator"] = est.value
            picked.append(row)
    if not picked:
        return frame.iloc[0:0]
    cols = ["estimator", "rho_u", "c", "scaled_alpha", "rho_m"] + [
        c for c in frame.columns if c.startswith(("truth_", "bias_lm", "bias_dm", "rmse_", "cover_"))
    ]
    return pd.DataFrame(picked)[cols]


def _write_cells(cells: Sequence[CellSummary], path: Path, fmt: OutputFormat) -> Path:
    if fmt is OutputFormat.JSON:
        return exports.write_cells_json(cells, path)
    return exports.write_cells_csv(cells, path)


def _resume_signature(cfg: RunConfig) -> Dict[str, Any]:
    """Settings that must match before finished cells can be reused; the grid axes may differ."""
    sig = cfg.model_dump(mode="json", include={"design", "dgp", "ci_reference", "correction", "rank_tol", "retry_budget"})
    sig["iterations"] = cfg.grid.iterations
    sig["base_seed"] = cfg.grid.base_seed
    return sig


def _finished_cells(cells_path: Path, settings_path: Path, cfg: RunConfig) -> List[CellSummary]:
    """Completed cells of an earlier run with the same settings, restricted to this grid."""
    if not cells_path.exists():
        return []
    try:
        saved = exports.load_model(RunConfig, settings_path)
    except (OSError, InterferenceDesignError) as exc:
        logger.warning("Not resuming from %s: cannot read %s (%s)", cells_path, settings_path, exc)
        return []
    if _resume_signature(saved) != _resume_signature(cfg):
        logger.warning("Not resuming from %s: run settings changed since it was written", cells_path)
        return []
    try:
        previous = exports.read_cells(cells_path)
    except InterferenceDesignError as exc:
        logger.warning("Not resuming from %s: %s", cells_path, exc)
        return []
    wanted = {cell_key(*coord) for coord in cfg.grid.cells()}
    return [c for c in previous if c.ok and c.key in wanted]


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))

    grid = cfg.grid
    if args.iterations is not None:
        grid = grid.model_copy(update={"iterations": args.iterations})
    if args.seed is not None:
        grid = grid.model_copy(update={"base_seed": args.seed})
    out_dir = Path(args.output_dir) if args.output_dir else cfg.output_dir
    fmt = OutputFormat(args.format) if args.format else cfg.format
    threads = args.threads or cfg.threads or config.THREADS
    cfg = cfg.model_copy(update={"grid": grid, "output_dir": out_dir, "format": fmt})

    cells_path = out_dir / ("cells.json" if fmt is OutputFormat.JSON else "cells.csv")
    settings_path = out_dir / RUN_SETTINGS_FILE
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        finished = {} if args.fresh else {c.key: c for c in _finished_cells(cells_path, settings_path, cfg)}
        exports.save_model(cfg, settings_path)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot prepare output directory {out_dir}: {exc}")

    order = [cell_key(*coord) for coord in grid.cells()]

    def in_grid_order() -> List[CellSummary]:
        return [finished[k] for k in order if k in finished]

    def flush(_idx: int, cell: CellSummary) -> None:
        finished[cell.key] = cell
        _write_cells(in_grid_order(), cells_path, fmt)

    print(
        f"[simulate] cells={grid.n_cells} resumed={len(finished)} iterations={grid.iterations} "
        f"threads={threads} seed={grid.base_seed}",
        file=sys.stderr,
    )
    try:
        sweep(
            grid,
            cfg.design,
            cfg.dgp,
            threads=threads,
            correction=cfg.correction,
            reference=cfg.ci_reference,
            rank_tol=cfg.rank_tol,
            retry_budget=cfg.retry_budget,
            on_cell=flush,
            skip=set(finished),
        )
        cells = in_grid_order()
        written = _write_cells(cells, cells_path, fmt)
        if cfg.plot or args.plot:
            for c in grid.c_values:
                for key, est in _ESTIMATOR_CHOICES.items():
                    try:
                        plot_rmse_curves(cells, c, None, est, out_dir / f"rmse_{key}_c{c:g}.svg")
                    except InterferenceDesignError as exc:
                        logger.warning("Skipping plot for c=%s (%s): %s", c, key, exc)
    except OSError as exc:
        return _fail(EXIT_IO, f"could not write results to {out_dir}: {exc}")

    summary = _summary_frame(cells)
    if len(summary):
        print(summary.to_string(index=False))
    print(f"[simulate] wrote {written}", file=sys.stderr)

    failed = [c for c in cells if not c.ok]
    if failed:
        print(f"[simulate] {len(failed)} cell(s) failed or incomplete", file=sys.stderr)
        return EXIT_FAILED_CELL
    return EXIT_OK


# ---------------------------------------------------------------------------
# select-design
# ---------------------------------------------------------------------------

def cmd_select_design(args: argparse.Namespace) -> int:
    try:
        cells = exports.read_cells(args.cells)
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read {args.cells}: {exc}")

    est = _ESTIMATOR_CHOICES[args.estimator]
    try:
        choices = select_min_rmse(cells, est)
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))
    match = [
        ch for (rho_u, c), ch in choices.items()
        if _float_key_match(rho_u, args.rho_u) and _float_key_match(c, args.c)
    ]
    if not match:
        return _fail(EXIT_USAGE, f"no completed cells for rho_u={args.rho_u}, c={args.c}")

    choice = match[0]
    n_arms = (len(choice.cell.truths) or args.M) + 1
    print(
        f"optimal design ({est.value}): scaled_alpha={choice.scaled_alpha:g} "
        f"alpha_bar={choice.scaled_alpha / n_arms:g} rho_m={choice.rho_m:.4f} rmse={choice.rmse:.4f}"
    )
    if choice.flat:
        print("warning: RMSE is flat across designs in this stratum; the choice of alpha does not matter")
    row = exports.cells_to_frame([choice.cell])
    print(row.to_string(index=False))
    return EXIT_OK


# ---------------------------------------------------------------------------
# assign
# ---------------------------------------------------------------------------

def _read_cluster_ids(path: str) -> List[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def _parse_sizes(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc


def cmd_assign(args: argparse.Namespace) -> int:
    try:
        ids: Optional[List[str]] = _read_cluster_ids(args.cluster_ids) if args.cluster_ids else None
        table = exports.read_sobol_table(args.table) if args.table else None
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read input: {exc}")
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))

    try:
        if ids is not None and args.clusters is not None and args.clusters != len(ids):
            raise ConfigError(f"--clusters {args.clusters} disagrees with {len(ids)} ids in {args.cluster_ids}")
        J = len(ids) if ids is not None else args.clusters
        if J is None:
            raise ConfigError("give --clusters or --cluster-ids")
        sizes = _parse_sizes(args.sizes) if args.sizes else None
        if sizes is not None and len(sizes) != J:
            raise ConfigError(f"--sizes lists {len(sizes)} clusters, expected {J}")
        if sizes is None and args.n is None:
            raise ConfigError("give --n or --sizes")
        given = args.alpha is not None or args.target_icc is not None
        if table is not None and given:
            raise ConfigError("--table fixes the probability vectors; drop --alpha / --target-icc")
        if table is None and not given:
            raise ConfigError("give --alpha or --target-icc")
        if table is not None and table.M != args.M:
            raise ConfigError(f"{args.table} has {table.M + 1} arms, --M {args.M} needs {args.M + 1}")

        sobol = table is not None or args.mode == "sobol"
        mode = AssignmentMode.SOBOL_DIRICHLET if sobol else AssignmentMode.TWO_STAGE_DIRICHLET
        if not sobol and sizes is not None and len(set(sizes)) > 1:
            raise ConfigError("unequal --sizes are only supported with --mode sobol")
        n = args.n if args.n is not None else max(sizes)

        rng = RngStream(args.seed)
        alpha_bar: Optional[float] = None
        if table is None:
            alpha_bar = alpha_for_icc(args.target_icc, args.M) if args.target_icc is not None else args.alpha
            spec = DesignSpec.balanced(J=J, n=n, M=args.M, alpha_bar=alpha_bar, mode=mode, K=args.K)
        if sobol:
            if table is None:
                table = build_sobol_table(spec)
            cluster_ids = ids if ids is not None else [str(j) for j in range(J)]
            assignment = assign_from_table(cluster_ids, sizes or [n] * J, table, rng)
        else:
            assignment = assign_two_stage(spec, rng)
            if ids is not None:
                assignment = dataclasses.replace(assignment, cluster_ids=tuple(ids))
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))

    formula = treatment_icc(alpha_bar, args.M) if alpha_bar is not None else None
    try:
        logger.info("Treatment ICC: formula %s, empirical (arm 0) %.4f",
                    "n/a" if formula is None else f"{formula:.4f}", empirical_icc(assignment, 0))
    except InterferenceDesignError as exc:
        logger.info("Treatment ICC: empirical undefined (%s)", exc)

    out = Path(args.output)
    meta = {
        "M": args.M,
        "alpha_bar": alpha_bar,
        "alpha": [alpha_bar] * (args.M + 1) if alpha_bar is not None else list(table.alpha) or None,
        "target_icc": args.target_icc,
        "treatment_icc": formula,
        "mode": mode.value,
        "K": table.K if table is not None else None,
        "table": args.table,
        "seed": args.seed,
    }
    if table is not None:
        meta["direction_set"] = table.direction_set
    try:
        exports.write_assignment_csv(assignment, out)
        exports.write_assignment_sidecar(assignment, out.with_suffix(".json"), meta)
        if table is not None and args.table_output:
            exports.write_sobol_table(table, args.table_output)
    except OSError as exc:
        return _fail(EXIT_IO, f"could not write {out}: {exc}")
    strength = f"alpha_bar={alpha_bar:g}" if alpha_bar is not None else f"table={args.table}"
    print(f"[assign] wrote {out} ({assignment.n_clusters} clusters, {strength})", file=sys.stderr)
    return EXIT_OK



# ---------------------------------------------------------------------------
# outcomes / fit
# ---------------------------------------------------------------------------

def cmd_outcomes(args: argparse.Namespace) -> int:
    try:
        params = exports.load_model(DgpParams, args.dgp) if args.dgp else DgpParams.benchmark()
        updates = {k: v for k, v in (("c", args.c), ("rho_u", args.rho_u)) if v is not None}
        params = DgpParams.model_validate({**params.model_dump(), **updates})
        assignment = exports.read_assignment_csv(args.assignment, args.M)
        outcomes = simulate_outcomes(assignment, params, RngStream(args.seed).child("outcomes"))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read input: {exc}")
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))

    try:
        out = exports.write_outcomes_csv(assignment, outcomes, args.output)
    except OSError as exc:
        return _fail(EXIT_IO, f"could not write {args.output}: {exc}")
    print(f"[outcomes] wrote {out} (c={params.c:g}, rho_u={params.rho_u:g})", file=sys.stderr)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    est = _ESTIMATOR_CHOICES[args.estimator]
    try:
        assignment, outcomes = exports.read_outcomes_csv(args.outcomes, args.M)
        design = build_lm_matrix(assignment) if est is Estimator.LINEAR_IN_MEANS else build_dm_matrix(assignment)
        fit = ols_fit(design, outcomes, tol=config.RANK_TOLERANCE, correction=VcovCorrection(args.correction))
        z = critical_value(CiReference(args.ci_reference), fit.n_clusters)
        contrast = haate_contrast_lm if est is Estimator.LINEAR_IN_MEANS else haate_contrast_dm
        contrasts = [contrast(fit, m, z) for m in range(1, assignment.M + 1)]
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read {args.outcomes}: {exc}")
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))

    if fit.dropped:
        print(f"dropped columns: {', '.join(str(t) for t in fit.dropped)}")
    for ct in contrasts:
        note = "  (delta_mm dropped, difference-in-means form)" if ct.degraded else ""
        print(
            f"psi({ct.arm},0) [{est.value}] estimate={ct.estimate:.4f} se={ct.se:.4f} "
            f"ci=[{ct.ci_lo:.4f}, {ct.ci_hi:.4f}]{note}"
        )
        if est is Estimator.DIFFERENCE_IN_MEANS:
            try:
                ratio, se = haate_ratio_dm(fit, ct.arm)
                print(f"ratio({ct.arm},0) = {ratio:.4f} (se {se:.4f})")
            except InterferenceDesignError as exc:
                logger.warning("Ratio effect for arm %d undefined: %s", ct.arm, exc)

    if args.output:
        try:
            written = exports.write_fit_json(fit, args.output)
        except OSError as exc:
            return _fail(EXIT_IO, f"could not write {args.output}: {exc}")
        print(f"[fit] wrote {written}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(args: argparse.Namespace) -> int:
    try:
        cells = exports.read_cells(args.cells)
    except InterferenceDesignError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read {args.cells}: {exc}")

    keys = list(_ESTIMATOR_CHOICES) if args.estimator == "both" else [args.estimator]
    out_dir = Path(args.output_dir)
    for key in keys:
        path = out_dir / f"rmse_{key}_c{args.c:g}.svg"
        try:
            plot_rmse_curves(cells, args.c, args.rho_u, _ESTIMATOR_CHOICES[key], path)
        except InterferenceDesignError as exc:
            return _fail(EXIT_USAGE, str(exc))
        except OSError as exc:
            return _fail(EXIT_IO, f"could not write {path}: {exc}")
        print(f"[plot] wrote {path}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--log-level", default=config.LOG_LEVEL,
                    help="Logging level (default: INTERFERENCE_LOG_LEVEL or INFO)")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Run a Monte Carlo sweep from a JSON config")
    sim.add_argument("config", help="Run config JSON (see configs/default.json)")
    sim.add_argument("--iterations", type=int, default=None, help="Override grid.iterations")
    sim.add_argument("--seed", type=int, default=None, help="Override grid.base_seed")
    sim.add_argument("--output-dir", default=None, help="Override output_dir")
    sim.add_argument("--format", choices=[f.value for f in OutputFormat], default=None)
    sim.add_argument("--threads", type=int, default=None,
                     help="Worker threads (default: config, then INTERFERENCE_THREADS)")
    sim.add_argument("--plot", action="store_true", help="Also write RMSE-curve SVGs")
    sim.add_argument("--fresh", action="store_true",
                     help="Ignore finished cells already in the output directory")
    sim.set_defaults(func=cmd_simulate)

    sel = sub.add_parser("select-design", help="Minimum-RMSE design for one stratum")
    sel.add_argument("cells", help="cells.csv or cells.json from simulate")
    sel.add_argument("--rho-u", type=float, required=True)
    sel.add_argument("--c", type=float, required=True)
    sel.add_argument("--estimator", choices=sorted(_ESTIMATOR_CHOICES), default="dm")
    sel.add_argument("--M", type=int, default=2, help="Treatments, used when the table has no truth columns")
    sel.set_defaults(func=cmd_select_design)

    asg = sub.add_parser("assign", help="Draw a treatment assignment")
    asg.add_argument("--clusters", type=int, default=None, help="Number of clusters J")
    asg.add_argument("--cluster-ids", default=None, help="File with one cluster id per line")
    asg.add_argument("--n", type=int, default=None, help="Units per cluster")
    asg.add_argument("--sizes", default=None, help="Comma-separated units per cluster (sobol mode)")
    asg.add_argument("--M", type=int, required=True, help="Number of non-control treatments")
    strength = asg.add_mutually_exclusive_group()
    strength.add_argument("--alpha", type=float, help="Balanced Dirichlet concentration alpha_bar")
    strength.add_argument("--target-icc", type=float, help="Target intra-cluster correlation of treatment")
    asg.add_argument("--mode", choices=["two_stage", "sobol"], default="two_stage")
    asg.add_argument("--K", type=int, default=None, help="Sobol table size (sobol mode)")
    asg.add_argument("--seed", type=int, default=config.BASE_SEED)
    asg.add_argument("--output", required=True, help="Assignment CSV; a .json sidecar is written next to it")
    asg.add_argument("--table", default=None,
                     help="Deploy from a saved Sobol table CSV (implies --mode sobol)")
    asg.add_argument("--table-output", default=None, help="Also write the Sobol table CSV here")
    asg.set_defaults(func=cmd_assign)

    out = sub.add_parser("outcomes", help="Simulate outcomes for an assignment CSV")
    out.add_argument("assignment", help="Assignment CSV from assign")
    out.add_argument("--M", type=int, required=True, help="Number of non-control treatments")
    out.add_argument("--dgp", default=None, help="DgpParams JSON (default: benchmark coefficients)")
    out.add_argument("--c", type=float, default=None, help="Override interference strength")
    out.add_argument("--rho-u", type=float, default=None, help="Override outcome ICC")
    out.add_argument("--seed", type=int, default=config.BASE_SEED)
    out.add_argument("--output", required=True, help="Outcomes CSV")
    out.set_defaults(func=cmd_outcomes)

    fit = sub.add_parser("fit", help="Estimate HAATE contrasts from an outcomes CSV")
    fit.add_argument("outcomes", help="Outcomes CSV (cluster_id, unit, arm, y)")
    fit.add_argument("--M", type=int, required=True, help="Number of non-control treatments")
    fit.add_argument("--estimator", choices=sorted(_ESTIMATOR_CHOICES), default="dm")
    fit.add_argument("--correction", choices=[v.value for v in VcovCorrection], default=config.VCOV_CORRECTION.value)
    fit.add_argument("--ci-reference", choices=[r.value for r in CiReference], default=config.CI_REFERENCE.value)
    fit.add_argument("--output", default=None, help="Also write the fit as JSON")
    fit.set_defaults(func=cmd_fit)

    plo = sub.add_parser("plot", help="RMSE-curve SVGs from a cells table")
    plo.add_argument("cells")
    plo.add_argument("--c", type=float, required=True, help="Interference level to plot")
    plo.add_argument("--rho-u", type=float, nargs="+", default=None, help="rho_u curves (default: all)")
    plo.add_argument("--estimator", choices=["both"] + sorted(_ESTIMATOR_CHOICES), default="both")
    plo.add_argument("--output-dir", default=".")
    plo.set_defaults(func=cmd_plot)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
