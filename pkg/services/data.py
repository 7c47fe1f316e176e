from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from config import ModelConfig, TermSpec
from .errors import FrameError, IngestionError, RankError, SchemaError
from .projection import TAU_RANK, dependent_columns

logger = logging.getLogger(__name__)

INTERCEPT = "(intercept)"
MISSING_TOKENS = {"", "na", "nan", "null", "none"}


def _label(value) -> str:
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value).strip()


def _fmt(value: float) -> str:
    return "%g" % value


@dataclass(frozen=True)
class Dataset:
    """Typed columns: float64 for numeric, pandas Categorical (sorted labels) for categorical"""
    frame: pd.DataFrame
    dropped: int = 0

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def columns(self) -> List[str]:
        return list(self.frame.columns)

    def is_categorical(self, column: str) -> bool:
        return isinstance(self.frame[column].dtype, pd.CategoricalDtype)

    def levels(self, column: str) -> List[str]:
        return list(self.frame[column].cat.categories)

    def numeric(self, column: str) -> np.ndarray:
        if column not in self.frame.columns:
            raise SchemaError(f"column '{column}' not in dataset")
        if self.is_categorical(column):
            raise SchemaError(f"column '{column}' is categorical, a numeric column is required")
        return self.frame[column].to_numpy(dtype=float)

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.frame.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True), self.dropped)


def dataset_from_frame(raw: pd.DataFrame, schema: Dict[str, str]) -> Dataset:
    """Coerce a raw table to declared column types, dropping incomplete rows"""
    missing_columns = [column for column in schema if column not in raw.columns]
    if missing_columns:
        raise SchemaError(f"missing columns: {', '.join(missing_columns)}", {"columns": missing_columns})

    columns = {}
    incomplete = np.zeros(len(raw), dtype=bool)
    for column, role in schema.items():
        values = raw[column]
        if values.dtype == object:
            text = values.astype(str).str.strip()
            absent = text.str.lower().isin(MISSING_TOKENS).to_numpy()
        else:
            text = values
            absent = values.isna().to_numpy()
        if role == "numeric":
            parsed = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
            bad = np.isnan(parsed) & ~absent
            if values.dtype == object and bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise IngestionError(
                    f"unparseable value '{text.iloc[row]}' in numeric column '{column}' at data row {row + 1}",
                    {"row": row + 1, "column": column},
                )
            absent = absent | ~np.isfinite(parsed)
            columns[column] = parsed
        elif role == "categorical":
            columns[column] = np.array([_label(v) for v in text], dtype=object)
        else:
            raise SchemaError(f"unknown column role '{role}' for column '{column}'")
        incomplete |= absent

    kept = ~incomplete
    frame = pd.DataFrame({name: values[kept] for name, values in columns.items()})
    for column, role in schema.items():
        if role == "categorical":
            labels = sorted(set(frame[column]))
            if not labels:
                raise SchemaError(f"categorical column '{column}' has no levels")
            frame[column] = pd.Categorical(frame[column], categories=labels)
    dropped = int(incomplete.sum())
    if dropped:
        logger.info(f"Dropped {dropped} incomplete rows of {len(raw)}")
    return Dataset(frame, dropped)


def load_csv(path: Union[str, Path], schema: Dict[str, str]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"data file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"data file has no header row: {path}")
    except Exception as e:
        logger.error(f"Error reading {path}: {str(e)}")
        raise SchemaError(f"cannot read data file {path}: {str(e)}")
    dataset = dataset_from_frame(raw, schema)
    logger.info(f"Loaded {dataset.n} rows from {path}")
    return dataset


@dataclass(frozen=True)
class Design:
    matrix: np.ndarray
    names: List[str]
    dropped: List[str] = field(default_factory=list)


def _main_effect(dataset: Dataset, column: str) -> Tuple[List[str], List[np.ndarray]]:
    if column not in dataset.frame.columns:
        raise SchemaError(f"term references unknown column '{column}'")
    if dataset.is_categorical(column):
        codes = dataset.frame[column].cat.codes.to_numpy()
        levels = dataset.levels(column)
        return ([f"{column}[{level}]" for level in levels[1:]],
                [(codes == j).astype(float) for j in range(1, len(levels))])
    return [column], [dataset.numeric(column)]


def _expand_term(dataset: Dataset, term: TermSpec) -> Tuple[List[str], List[np.ndarray]]:
    if term.kind == "intercept":
        return [], []
    if term.kind == "categorical":
        column = term.columns[0]
        if column not in dataset.frame.columns:
            raise SchemaError(f"term references unknown column '{column}'")
        if not dataset.is_categorical(column):
            raise SchemaError(f"categorical term references numeric column '{column}'")
        return _main_effect(dataset, column)
    if term.kind == "interaction":
        parts = [_main_effect(dataset, column) for column in term.columns]
        names, values = [], []
        for combo in product(*[list(zip(*part)) for part in parts]):
            names.append(":".join(name for name, _ in combo))
            values.append(np.prod([v for _, v in combo], axis=0))
        return names, values

    column = term.columns[0]
    if column not in dataset.frame.columns:
        raise SchemaError(f"term references unknown column '{column}'")
    v = dataset.numeric(column)
    if term.kind == "numeric":
        return [column], [v]
    if term.kind == "piecewise_linear":
        names = [column] + [f"{column}_hinge{_fmt(k)}" for k in term.knots]
        return names, [v] + [np.maximum(v - k, 0.0) for k in term.knots]
    if term.kind == "polynomial":
        names = [column] + [f"{column}^{d}" for d in range(2, term.degree + 1)]
        return names, [v ** d for d in range(1, term.degree + 1)]
    if term.kind == "step":
        return ([f"{column}>={_fmt(t)}" for t in term.thresholds],
                [(v >= t).astype(float) for t in term.thresholds])
    raise SchemaError(f"unsupported term kind '{term.kind}'")


def expand_terms(
    dataset: Dataset,
    terms: Sequence[TermSpec],
    weights: Optional[np.ndarray] = None,
    intercept: bool = True,
    drop_dependent: bool = False,
) -> Design:
    """Expand term specs into a design matrix with the intercept first"""
    names: List[str] = [INTERCEPT] if intercept else []
    values: List[np.ndarray] = [np.ones(dataset.n)] if intercept else []
    for term in terms:
        term_names, term_values = _expand_term(dataset, term)
        names.extend(term_names)
        values.extend(term_values)
    if not values:
        return Design(np.zeros((dataset.n, 0)), [])
    matrix = np.column_stack(values).astype(float)

    dependent = dependent_columns(matrix, weights, TAU_RANK)
    if dependent and drop_dependent:
        if intercept and 0 in dependent:
            raise RankError("intercept column is degenerate on this sample", [INTERCEPT])
        keep = [j for j in range(len(names)) if j not in set(dependent)]
        dropped = [names[j] for j in dependent]
        logger.warning(f"Dropping columns dependent on this sample: {dropped}")
        return Design(matrix[:, keep], [names[j] for j in keep], dropped)
    if dependent:
        dropped = [names[j] for j in dependent]
        logger.error(f"Rank-deficient design, dependent columns: {dropped}")
        raise RankError(f"design is rank deficient; dependent columns: {', '.join(dropped)}", dropped)
    return Design(matrix, names)


@dataclass(frozen=True)
class ModelFrame:
    y: np.ndarray
    x: np.ndarray
    z_raw: np.ndarray
    z_names: List[str]
    w: np.ndarray
    w_names: List[str]
    weights: np.ndarray
    clusters: np.ndarray
    mode: str
    mode_source: str
    did_check: str
    source: Dataset
    config: ModelConfig
    groups: Optional[np.ndarray] = None
    dropped_columns: Tuple[str, ...] = ()
    weights_column: Optional[str] = None
    cluster_column: Optional[str] = None

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.w.shape[1]

    @property
    def m(self) -> int:
        return self.z_raw.shape[1]

    def with_mode(self, mode: str, source: str, did_check: Optional[str] = None) -> "ModelFrame":
        return replace(self, mode=mode, mode_source=source, did_check=did_check or self.did_check)


def check_did_cells(dataset: Dataset, config: ModelConfig, z_raw: np.ndarray) -> str:
    if not config.cell:
        return "unverifiable"
    codes = dataset.frame[config.cell].cat.codes.to_numpy()
    for j in range(z_raw.shape[1]):
        col = z_raw[:, j]
        lo = np.full(codes.max() + 1, np.inf)
        hi = np.full(codes.max() + 1, -np.inf)
        np.minimum.at(lo, codes, col)
        np.maximum.at(hi, codes, col)
        spread = hi - lo
        if np.any(spread[np.isfinite(spread)] > 1e-12 * max(1.0, np.max(np.abs(col)))):
            raise FrameError(f"instrument column {j} varies within cells of '{config.cell}' in did-rd mode")
    return "verified"


def build_frame(
    dataset: Dataset,
    config: ModelConfig,
    mode: Optional[str] = None,
    weights: Optional[str] = None,
    cluster: Optional[str] = None,
    drop_dependent: bool = False,
) -> ModelFrame:
    """Assemble and validate a model frame from a dataset and model configuration"""
    weights_column = weights or config.weights
    cluster_column = cluster or config.cluster

    if weights_column:
        row_weights = dataset.numeric(weights_column)
        if np.any(row_weights < 0):
            raise FrameError(f"weights column '{weights_column}' has negative entries")
    else:
        row_weights = np.ones(dataset.n)
    total = row_weights.sum()
    if not np.isfinite(total) or total <= 0:
        raise FrameError("row weights must sum to a positive total")

    design = expand_terms(dataset, config.covariates, row_weights, drop_dependent=drop_dependent)
    w = design.matrix
    if w.shape[1] == 0 or not np.all(w[:, 0] == 1.0):
        raise FrameError("covariate design must start with a constant intercept column")
    instruments = expand_terms(dataset, config.instruments, row_weights, intercept=False, drop_dependent=drop_dependent)
    z_raw = instruments.matrix
    p, m = w.shape[1], z_raw.shape[1]
    if m == 0 and not drop_dependent:
        raise FrameError("at least one instrument column is required")

    if dataset.n <= p + m:
        raise FrameError(f"need more rows than covariates plus instruments (n={dataset.n}, p={p}, m={m})")
    if np.count_nonzero(row_weights > 0) < p + m:
        raise FrameError("too few rows with positive weight for the design")

    if cluster_column:
        if cluster_column not in dataset.frame.columns:
            raise SchemaError(f"cluster column '{cluster_column}' not in dataset")
        clusters = pd.factorize(dataset.frame[cluster_column], sort=True)[0].astype(np.int64)
    else:
        clusters = np.arange(dataset.n, dtype=np.int64)

    groups = None
    if config.groups:
        if config.groups not in dataset.frame.columns:
            raise SchemaError(f"groups column '{config.groups}' not in dataset")
        groups = np.array([_label(v) for v in dataset.frame[config.groups]], dtype=object)

    resolved = mode or config.mode
    mode_source = "declared"
    if resolved == "auto":
        resolved, mode_source = "standard", "default"
    did_check = check_did_cells(dataset, config, z_raw) if resolved == "did-rd" else "n/a"

    frame = ModelFrame(
        y=dataset.numeric(config.outcome),
        x=dataset.numeric(config.treatment),
        z_raw=z_raw,
        z_names=instruments.names,
        w=w,
        w_names=design.names,
        weights=row_weights,
        clusters=clusters,
        mode=resolved,
        mode_source=mode_source,
        did_check=did_check,
        source=dataset,
        config=config,
        groups=groups,
        dropped_columns=tuple(design.dropped),
        weights_column=weights_column,
        cluster_column=cluster_column,
    )
    logger.info(f"Built frame: n={frame.n}, p={p}, m={m}, mode={resolved}")
    return frame
