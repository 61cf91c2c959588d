"""
CSV / JSON interchange for sweep results, assignments, outcomes and fits.

CSV is canonical for tables; JSON mirrors it.  Column names are fixed here
and nowhere else.  Readers raise ``MalformedTableError`` on missing columns
or unparsable values; OS-level failures propagate as ``OSError``.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from errors import MalformedTableError
from models import PAD_LABEL, AssignmentMatrix
from services.dgp import OutcomeMatrix
from services.estimate import FitResult
from services.montecarlo import CellSummary, EstimatorSummary
from services.randomize import SobolDrawTable

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)

# Leading columns are the summary layout; the rest are diagnostics.
CELL_COLUMNS: List[str] = [
    "rho_u", "c", "rho_m",
    "bias_lm", "bias_dm", "rmse_lm", "rmse_dm", "se_lm", "se_dm", "cover_lm", "cover_dm",
]
CELL_EXTRA_COLUMNS: List[str] = [
    "scaled_alpha", "rho_m_dispersion", "empirical_icc",
    "bias_mc_se_lm", "bias_mc_se_dm", "error_var_lm", "error_var_dm", "degraded_lm",
    "analytic_bias_dm", "iterations", "completed", "error",
]
REQUIRED_CELL_COLUMNS = ("rho_u", "c", "rho_m", "rmse_lm", "rmse_dm")


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Cell summaries
# ---------------------------------------------------------------------------

def _n_truths(cells: Sequence[CellSummary]) -> int:
    return max((len(c.truths) for c in cells), default=0)


def cells_to_frame(cells: Sequence[CellSummary]) -> pd.DataFrame:
    k = _n_truths(cells)
    truth_cols = [f"truth_{m}" for m in range(1, k + 1)]
    rows: List[Dict[str, Any]] = []
    for cell in cells:
        row: Dict[str, Any] = {"rho_u": cell.rho_u, "c": cell.c, "rho_m": cell.rho_m}
        for m, col in enumerate(truth_cols):
            row[col] = cell.truths[m] if m < len(cell.truths) else math.nan
        for tag, s in (("lm", cell.lm), ("dm", cell.dm)):
            row[f"bias_{tag}"] = s.bias
            row[f"rmse_{tag}"] = s.rmse
            row[f"se_{tag}"] = s.mean_se
            row[f"cover_{tag}"] = s.coverage
            row[f"bias_mc_se_{tag}"] = s.bias_mc_se
            row[f"error_var_{tag}"] = s.error_variance
        row.update(
            scaled_alpha=cell.scaled_alpha,
            rho_m_dispersion=cell.rho_m_dispersion,
            empirical_icc=cell.empirical_icc,
            degraded_lm=cell.lm.degraded_share,
            analytic_bias_dm=cell.analytic_dm_bias,
            iterations=cell.iterations_requested,
            completed=cell.iterations_completed,
            error=cell.error or "",
        )
        rows.append(row)
    columns = CELL_COLUMNS[:3] + truth_cols + CELL_COLUMNS[3:] + CELL_EXTRA_COLUMNS
    return pd.DataFrame(rows, columns=columns)


def _float(row: pd.Series, col: str) -> float:
    value = row.get(col, math.nan)
    return math.nan if pd.isna(value) else float(value)


def frame_to_cells(df: pd.DataFrame) -> List[CellSummary]:
    missing = [c for c in REQUIRED_CELL_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedTableError(f"cells table is missing columns: {', '.join(missing)}")
    truth_cols = sorted(
        (c for c in df.columns if c.startswith("truth_")), key=lambda c: int(c.split("_")[1])
    )
    cells: List[CellSummary] = []
    try:
        for _, row in df.iterrows():
            summaries = {
                tag: EstimatorSummary(
                    bias=_float(row, f"bias_{tag}"),
                    rmse=_float(row, f"rmse_{tag}"),
                    mean_se=_float(row, f"se_{tag}"),
                    coverage=_float(row, f"cover_{tag}"),
                    bias_mc_se=_float(row, f"bias_mc_se_{tag}"),
                    degraded_share=_float(row, "degraded_lm") if tag == "lm" else 0.0,
                    error_variance=_float(row, f"error_var_{tag}"),
                )
                for tag in ("lm", "dm")
            }
            iterations = int(row["iterations"]) if "iterations" in row and not pd.isna(row["iterations"]) else 0
            completed = int(row["completed"]) if "completed" in row and not pd.isna(row["completed"]) else iterations
            error = row.get("error", "")
            cells.append(
                CellSummary(
                    rho_u=float(row["rho_u"]),
                    c=float(row["c"]),
                    scaled_alpha=_float(row, "scaled_alpha"),
                    rho_m=float(row["rho_m"]),
                    rho_m_dispersion=_float(row, "rho_m_dispersion"),
                    truths=tuple(float(row[c]) for c in truth_cols if not pd.isna(row[c])),
                    lm=summaries["lm"],
                    dm=summaries["dm"],
                    iterations_requested=iterations,
                    iterations_completed=completed,
                    analytic_dm_bias=_float(row, "analytic_bias_dm"),
                    empirical_icc=_float(row, "empirical_icc"),
                    error=str(error) if isinstance(error, str) and error else None,
                )
            )
    except (TypeError, ValueError) as exc:
        raise MalformedTableError(f"cells table holds unparsable values: {exc}") from exc
    return cells


def write_cells_csv(cells: Sequence[CellSummary], path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    cells_to_frame(cells).to_csv(out, index=False)
    return out


def write_cells_json(cells: Sequence[CellSummary], path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    records = cells_to_frame(cells).to_dict(orient="records")
    out.write_text(json.dumps(records, indent=2), encoding="utf-8")
    return out


def read_cells(path: PathLike) -> List[CellSummary]:
    """Load a cells table written by ``write_cells_csv`` or ``write_cells_json``."""
    p = Path(path)
    try:
        if p.suffix.lower() == ".json":
            df = pd.DataFrame(json.loads(p.read_text(encoding="utf-8")))
        else:
            df = pd.read_csv(p, keep_default_na=True, float_precision="round_trip")
    except (json.JSONDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedTableError(f"could not parse {p}: {exc}") from exc
    if "error" in df.columns:
        df["error"] = df["error"].fillna("")
    return frame_to_cells(df)


# ---------------------------------------------------------------------------
# Assignments, outcomes, Sobol tables
# ---------------------------------------------------------------------------

def _cluster_names(assignment: AssignmentMatrix) -> List[str]:
    if assignment.cluster_ids is not None:
        return list(assignment.cluster_ids)
    return [str(j) for j in range(assignment.n_clusters)]


def assignment_to_frame(assignment: AssignmentMatrix, outcomes: Optional[OutcomeMatrix] = None) -> pd.DataFrame:
    mask = assignment.unit_mask()
    rows, units = np.nonzero(mask)
    names = np.asarray(_cluster_names(assignment), dtype=object)
    data: Dict[str, Any] = {
        "cluster": names[rows],
        "unit": units,
        "arm": assignment.labels[mask],
    }
    if outcomes is not None:
        data["y"] = outcomes.y[mask]
    return pd.DataFrame(data)


def _read_csv(path: PathLike, **kwargs: Any) -> pd.DataFrame:
    try:
        return pd.read_csv(Path(path), **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedTableError(f"could not parse {path}: {exc}") from exc


def write_assignment_csv(assignment: AssignmentMatrix, path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    assignment_to_frame(assignment).to_csv(out, index=False)
    return out


def _assignment_from_frame(df: pd.DataFrame, M: int, path: PathLike):
    """Labels from cluster,unit,arm rows plus the (row, unit) slot of every record."""
    missing = {"cluster", "unit", "arm"} - set(df.columns)
    if missing:
        raise MalformedTableError(f"{path} is missing columns: {', '.join(sorted(missing))}")
    if df.empty:
        raise MalformedTableError(f"{path} has no rows")
    try:
        units = df["unit"].to_numpy(dtype=np.int64)
        arms = df["arm"].to_numpy(dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise MalformedTableError(f"{path} holds non-integer unit or arm values: {exc}") from exc
    if (units < 0).any() or (arms < 0).any() or (arms > M).any():
        raise MalformedTableError(f"{path}: units must be >= 0 and arms within 0..{M}")
    if df.duplicated(["cluster", "unit"]).any():
        raise MalformedTableError(f"{path} lists a (cluster, unit) pair twice")

    ids = list(dict.fromkeys(df["cluster"]))
    pos = {cid: j for j, cid in enumerate(ids)}
    rows = df["cluster"].map(pos).to_numpy()
    labels = np.full((len(ids), int(units.max()) + 1), PAD_LABEL, dtype=np.int64)
    labels[rows, units] = arms
    probs = np.full((len(ids), M + 1), 1.0 / (M + 1))
    assignment = AssignmentMatrix.from_labels(labels, probs, cluster_ids=tuple(ids))
    return assignment, rows, units


def read_assignment_csv(path: PathLike, M: int) -> AssignmentMatrix:
    """Rebuild labels from a cluster,unit,arm file.  Probability vectors are not stored there."""
    df = _read_csv(path, dtype={"cluster": str})
    return _assignment_from_frame(df, M, path)[0]


def write_assignment_sidecar(
    assignment: AssignmentMatrix,
    path: PathLike,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """JSON with run metadata plus each cluster's probability vector."""
    out = _ensure_parent(Path(path))
    payload = dict(meta or {})
    payload["cluster_probs"] = {
        name: [float(x) for x in row]
        for name, row in zip(_cluster_names(assignment), assignment.cluster_probs)
    }
    out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return out


def write_outcomes_csv(assignment: AssignmentMatrix, outcomes: OutcomeMatrix, path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    assignment_to_frame(assignment, outcomes).to_csv(out, index=False)
    return out


def read_outcomes_csv(path: PathLike, M: int) -> Tuple[AssignmentMatrix, OutcomeMatrix]:
    """Assignment and outcomes from a cluster,unit,arm,y file; absent slots hold NaN."""
    df = _read_csv(path, dtype={"cluster": str}, float_precision="round_trip")
    if "y" not in df.columns:
        raise MalformedTableError(f"{path} has no y column")
    assignment, rows, units = _assignment_from_frame(df, M, path)
    try:
        values = df["y"].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedTableError(f"{path} holds non-numeric outcomes: {exc}") from exc
    y = np.full(assignment.labels.shape, np.nan)
    y[rows, units] = values
    return assignment, OutcomeMatrix(y=y)


def write_sobol_table(table: SobolDrawTable, path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    cols = [f"arm_{m}" for m in range(table.M + 1)]
    pd.DataFrame(table.vectors, columns=cols).to_csv(out, index=False)
    return out


def read_sobol_table(path: PathLike) -> SobolDrawTable:
    df = _read_csv(path, float_precision="round_trip")
    cols = [c for c in df.columns if c.startswith("arm_")]
    if not cols:
        raise MalformedTableError(f"{path} has no arm_* columns")
    cols.sort(key=lambda c: int(c.split("_")[1]))
    try:
        vectors = df[cols].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedTableError(f"{path} holds non-numeric probabilities: {exc}") from exc
    return SobolDrawTable(vectors=vectors, alpha=())


# ---------------------------------------------------------------------------
# Fits and configuration models
# ---------------------------------------------------------------------------

def fit_to_dict(fit: FitResult) -> Dict[str, Any]:
    vcov = fit.vcov if fit.vcov is not None else np.full((len(fit.retained),) * 2, math.nan)
    return {
        "coefficients": {str(t): float(b) for t, b in zip(fit.retained, fit.coefficients)},
        "dropped": [str(t) for t in fit.dropped],
        "columns": [str(t) for t in fit.retained],
        "vcov_lower": [[float(v) for v in vcov[i, : i + 1]] for i in range(vcov.shape[0])],
        "n_clusters": fit.n_clusters,
        "correction": fit.correction.value,
    }


def write_fit_json(fit: FitResult, path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    out.write_text(json.dumps(fit_to_dict(fit), indent=2), encoding="utf-8")
    return out


def save_model(model: BaseModel, path: PathLike) -> Path:
    out = _ensure_parent(Path(path))
    out.write_text(model.model_dump_json(indent=2), encoding="utf-8")
    return out


def load_model(cls: Type[ModelT], path: PathLike) -> ModelT:
    try:
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise MalformedTableError(f"{path}: {exc}") from exc
