"""
Result files and the coefficient table.

JSON keeps full double precision (shortest round-trip repr), CSV uses 17
significant digits. Outputs carry no timestamps so identical inputs give
byte-identical files.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import VERSION
from .synthlab import RNG_NAME

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"
SMALL_SAMPLE_NOTE = "cluster-robust variances scaled by G/(G-1)"
GENERATED_REGRESSOR_NOTE = "weight-profile standard errors treat the first-stage fit as known"

TABLE_ROWS = (
    ("(1) OLS", "beta_ols"),
    ("(2) IV-weighted OLS, covariates", "beta_c"),
    ("(3) IV-weighted OLS, covariates and levels", "beta_cl"),
    ("(4) IV", "beta_iv"),
)
DIFFERENCE_ROWS = (
    ("(2)–(1) covariate weights", "beta_c", "beta_ols", "covariate_weight"),
    ("(3)–(2) treatment-level weights", "beta_cl", "beta_c", "treatment_level_weight"),
    ("(4)–(3) marginal effects", "beta_iv", "beta_cl", "marginal_effect"),
    ("(4)–(1) total", "beta_iv", "beta_ols", "total"),
)


def build_metadata(
    command: str,
    seed: Optional[int] = None,
    mode: Optional[str] = None,
    se_regime: Optional[str] = None,
    threads: int = 1,
    **extra: Any,
) -> Dict[str, Any]:
    meta = {
        "version": VERSION,
        "command": command,
        "seed": seed,
        "mode": mode,
        "se_regime": se_regime,
        "threads": threads,
        "rng": RNG_NAME,
        "small_sample_correction": SMALL_SAMPLE_NOTE,
        "generated_regressor": GENERATED_REGRESSOR_NOTE,
    }
    meta.update(extra)
    return meta


def to_jsonable(value: Any) -> Any:
    """Plain Python containers with non-finite floats as null"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def write_json(path: Union[str, Path], payload: Dict[str, Any], metadata: Dict[str, Any]) -> Path:
    path = Path(path)
    document = {"metadata": metadata}
    document.update(payload)
    try:
        text = json.dumps(to_jsonable(document), indent=2, allow_nan=False, ensure_ascii=False)
        path.write_text(text + "\n", encoding="utf-8")
    except (OSError, ValueError) as e:
        logger.error(f"Failed to write {path}: {str(e)}")
        raise
    logger.info(f"Wrote {path}")
    return path


def write_csv(path: Union[str, Path], table: pd.DataFrame) -> Path:
    path = Path(path)
    try:
        table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write {path}: {str(e)}")
        raise
    logger.info(f"Wrote {path}")
    return path


def _cell(value: Optional[float], digits: int, wrap: bool = False) -> str:
    if value is None or not np.isfinite(value):
        return ""
    text = f"{value:.{digits}f}"
    return f"({text})" if wrap else text


def format_table(
    estimates: Dict[str, Tuple[float, Optional[float]]],
    difference_ses: Optional[Dict[str, float]] = None,
    digits: int = 3,
) -> str:
    """Four coefficients with SEs, then the telescoping differences"""
    difference_ses = difference_ses or {}
    label_width = max(len(label) for label, *_ in TABLE_ROWS + DIFFERENCE_ROWS) + 2
    lines = [f"{'':<{label_width}}{'Estimate':>12}{'SE':>14}"]
    for label, key in TABLE_ROWS:
        value, se = estimates[key]
        lines.append(f"{label:<{label_width}}{_cell(value, digits):>12}{_cell(se, digits, True):>14}")
    lines.append("Difference")
    for label, upper, lower, component in DIFFERENCE_ROWS:
        value = estimates[upper][0] - estimates[lower][0]
        se = difference_ses.get(component)
        lines.append(f"{label:<{label_width}}{_cell(value, digits):>12}{_cell(se, digits, True):>14}")
    return "\n".join(lines) + "\n"


def format_decomposition(result, digits: int = 3) -> str:
    estimates = {name: (est.value, est.se) for name, est in result.coefficients.items()}
    return format_table(estimates, result.component_ses, digits)


def decomposition_table(result) -> pd.DataFrame:
    rows: List[Dict[str, Any]] = [
        {"quantity": name, "value": est.value, "se": est.se} for name, est in result.coefficients.items()
    ]
    rows += [
        {"quantity": name, "value": result.components[name], "se": result.component_ses[name]}
        for name in ("covariate_weight", "treatment_level_weight", "marginal_effect")
    ]
    rows.append({"quantity": "total", "value": result.total, "se": result.component_ses["total"]})
    return pd.DataFrame(rows, columns=["quantity", "value", "se"])


def checks_table(checks: Iterable) -> pd.DataFrame:
    return pd.DataFrame(
        [check.to_dict() for check in checks],
        columns=["name", "residual", "tolerance", "applicable", "passed", "note"],
    )
