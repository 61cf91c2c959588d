"""
Configuration module for the interference design toolkit.
Loads environment variables for run-wide defaults and validates JSON run
configs (design, data-generating parameters, sweep grid, output options).
"""

import json
import os
from enum import Enum
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError, InterferenceDesignError
from models import CiReference, DesignSpec, DgpParams, VcovCorrection, validate_design
from services.montecarlo import SweepGrid
from services.thresholds import DEFAULT_BASE_SEED, RANK_TOL, RETRY_BUDGET

env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)


def _parse_bool(value: str) -> bool:
    return value.strip().lower() in ("true", "1", "yes")


def _parse_int(value: str, default: int) -> int:
    try:
        return int(value)
    except (ValueError, TypeError):
        print(f"WARNING: Invalid integer value '{value}', using default {default}")
        return default


def _parse_float(value: str, default: float) -> float:
    try:
        return float(value)
    except (ValueError, TypeError):
        print(f"WARNING: Invalid float value '{value}', using default {default}")
        return default


def _parse_choice(value: str, enum: type, default: Enum) -> Enum:
    try:
        return enum(value.strip())
    except ValueError:
        print(f"WARNING: Invalid {enum.__name__} value '{value}', using default {default.value}")
        return default


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------
THREADS = max(1, _parse_int(os.getenv("INTERFERENCE_THREADS", str(os.cpu_count() or 1)), os.cpu_count() or 1))
LOG_LEVEL = os.getenv("INTERFERENCE_LOG_LEVEL", "INFO").upper()
BASE_SEED = _parse_int(os.getenv("INTERFERENCE_BASE_SEED", str(DEFAULT_BASE_SEED)), DEFAULT_BASE_SEED)
RETRY_BUDGET_OVERRIDE = _parse_int(os.getenv("INTERFERENCE_RETRY_BUDGET", str(RETRY_BUDGET)), RETRY_BUDGET)
PLOT_BY_DEFAULT = _parse_bool(os.getenv("INTERFERENCE_PLOT", "false"))


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------
RANK_TOLERANCE = _parse_float(os.getenv("INTERFERENCE_RANK_TOL", str(RANK_TOL)), RANK_TOL)
CI_REFERENCE = _parse_choice(os.getenv("INTERFERENCE_CI_REFERENCE", "normal"), CiReference, CiReference.NORMAL)
VCOV_CORRECTION = _parse_choice(os.getenv("INTERFERENCE_VCOV_CORRECTION", "CR1"), VcovCorrection, VcovCorrection.CR1)


# ---------------------------------------------------------------------------
# Run configs
# ---------------------------------------------------------------------------

class OutputFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


class RunConfig(BaseModel):
    """One simulation run: the design template, DGP parameters and sweep grid.

    ``design.alpha`` is a placeholder for sweeps; every cell replaces it from
    ``grid.scaled_alpha_values``.  ``dgp.rho_u`` and ``dgp.c`` are replaced
    the same way.
    """

    model_config = ConfigDict(frozen=True)

    design: DesignSpec
    dgp: DgpParams = Field(default_factory=DgpParams.benchmark)
    grid: SweepGrid = Field(default_factory=lambda: SweepGrid(base_seed=BASE_SEED))
    output_dir: Path = Path("results")
    format: OutputFormat = OutputFormat.CSV
    plot: bool = PLOT_BY_DEFAULT
    threads: Optional[int] = Field(default=None, ge=1)
    ci_reference: CiReference = CI_REFERENCE
    correction: VcovCorrection = VCOV_CORRECTION
    rank_tol: float = Field(default=RANK_TOLERANCE, gt=0)
    retry_budget: int = Field(default=RETRY_BUDGET_OVERRIDE, ge=0)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path) -> RunConfig:
    """Parse and validate a JSON run config; every failure becomes ``ConfigError``."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{p}: {_describe(exc)}") from exc
    try:
        validate_design(cfg.design)
        cfg.dgp.check()
    except InterferenceDesignError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if cfg.dgp.M != cfg.design.M:
        raise ConfigError(f"{p}: dgp describes M={cfg.dgp.M} treatments, design has M={cfg.design.M}")
    return cfg


if __name__ == "__main__":
    print("=" * 60)
    print("Configuration Settings")
    print("=" * 60)

    print("\nExecution:")
    print(f"   Threads: {THREADS}")
    print(f"   Log Level: {LOG_LEVEL}")
    print(f"   Base Seed: {BASE_SEED}")
    print(f"   Retry Budget: {RETRY_BUDGET_OVERRIDE}")
    print(f"   Plot By Default: {'Yes' if PLOT_BY_DEFAULT else 'No'}")

    print("\nEstimation:")
    print(f"   Rank Tolerance: {RANK_TOLERANCE:g}")
    print(f"   CI Reference: {CI_REFERENCE.value}")
    print(f"   Variance Correction: {VCOV_CORRECTION.value}")

    print("\n" + "=" * 60)
