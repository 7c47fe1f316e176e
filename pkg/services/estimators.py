from dataclasses import dataclass
from typing import Callable, List, Optional, Union, TYPE_CHECKING
import logging

import numpy as np
import pandas as pd
import statsmodels.api as sm

from .errors import DegenerateTreatmentError, FrameError, IvGapError, RelevanceError, VcovError
from .inference import cluster_count, ratio_se, small_sample_factor
from .projection import WeightedProjector

if TYPE_CHECKING:
    from .data import ModelFrame
    from .projection import ResidualizedFrame

logger = logging.getLogger(__name__)

TAU_DENOM = 1e-12
F_LABEL = "robust Wald F (not the effective F)"


@dataclass(frozen=True)
class CoefEstimate:
    value: float
    se: Optional[float]
    denominator: float

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "denominator": self.denominator}


def _first_stage_projector(frame: "ModelFrame") -> WeightedProjector:
    design = np.column_stack([frame.z_raw, frame.w])
    return WeightedProjector(design, frame.weights, list(frame.z_names) + list(frame.w_names))


def make_synthetic_instrument(frame: "ModelFrame") -> np.ndarray:
    """First-stage fitted value of X on (Zraw, W)"""
    fitted = _first_stage_projector(frame).project(frame.x).fitted
    logger.debug(f"Synthetic instrument from {frame.m} instrument columns")
    return fitted


def check_relevance(rframe: "ResidualizedFrame") -> float:
    """The shared IV denominator Σ w d Z̃, refusing it when it is numerically zero"""
    denominator = rframe.iv_denominator()
    if abs(denominator) <= TAU_DENOM * float(rframe.weights.sum()):
        f_stat = None
        try:
            f_stat = first_stage_summary(rframe.frame).f_stat
        except IvGapError as e:
            logger.warning(f"First-stage F unavailable: {e.message}")
        logger.error(f"IV denominator {denominator:.3e} fails the relevance check")
        raise RelevanceError(f"instrument is irrelevant: IV denominator {denominator:.3e}", f_stat)
    return denominator


def ols_beta(rframe: "ResidualizedFrame") -> CoefEstimate:
    """Σ w Ỹ X̃ / Σ w X̃²"""
    x_t = rframe.x_t
    denominator = float(np.sum(rframe.weights * x_t * x_t))
    x_scale = float(np.sum(rframe.weights * rframe.frame.x ** 2))
    if denominator <= TAU_DENOM * max(x_scale, 1e-300):
        logger.error("Treatment has no variation left after partialling out covariates")
        raise DegenerateTreatmentError("treatment residual X̃ is identically zero")
    frame = rframe.frame
    value, se = ratio_se(rframe.y_t * x_t, x_t * x_t, frame.weights, frame.clusters)
    return CoefEstimate(value, se, denominator)


def iv_beta(rframe: "ResidualizedFrame") -> CoefEstimate:
    """Σ w Ỹ Z̃ / Σ w X̃ Z̃, or with unresidualized Y and X in did-rd mode"""
    denominator = check_relevance(rframe)
    frame = rframe.frame
    y = frame.y if rframe.mode == "did-rd" else rframe.y_t
    value, se = ratio_se(y * rframe.z_t, rframe.iv_regressor * rframe.z_t, frame.weights, frame.clusters)
    return CoefEstimate(value, se, denominator)


@dataclass(frozen=True)
class FirstStageSummary:
    names: List[str]
    coefficients: np.ndarray
    ses: np.ndarray
    f_stat: float
    df: int
    n_clusters: int
    perfect_fit: bool
    label: str = F_LABEL

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coefficient": self.coefficients, "se": self.ses})


def first_stage_summary(frame: "ModelFrame") -> FirstStageSummary:
    """First-stage coefficients, cluster-robust SEs and the Wald F for the instruments over m"""
    projector = _first_stage_projector(frame)
    keep = frame.weights > 0
    _, groups = np.unique(frame.clusters[keep], return_inverse=True)
    n_clusters = cluster_count(frame.clusters, frame.weights)
    factor = small_sample_factor(n_clusters)

    model = sm.WLS(frame.x[keep], projector.design[keep], weights=frame.weights[keep])
    fit = model.fit(cov_type="cluster", cov_kwds={"groups": groups, "use_correction": False})
    vcov = factor * np.asarray(fit.cov_params())
    ses = np.sqrt(np.clip(np.diag(vcov), 0.0, None))

    m = frame.m
    x_scale = float(np.max(np.abs(frame.x))) if frame.n else 0.0
    perfect = float(np.max(np.abs(fit.resid))) <= 1e-10 * max(x_scale, 1e-300)
    if perfect:
        f_stat = float(np.finfo(float).max)
    else:
        if np.linalg.matrix_rank(vcov[:m, :m]) < m:
            raise VcovError("first-stage covariance of the instrument coefficients is singular")
        restriction = np.eye(len(fit.params))[:m]
        f_stat = float(fit.wald_test(restriction, cov_p=vcov, use_f=False, scalar=True).statistic) / m
    logger.info(f"First stage: {F_LABEL} = {f_stat:.4g} on {m} instruments, {n_clusters} clusters")
    return FirstStageSummary(
        names=list(projector.names),
        coefficients=np.asarray(fit.params),
        ses=ses,
        f_stat=f_stat,
        df=m,
        n_clusters=n_clusters,
        perfect_fit=perfect,
    )


RowFilter = Union[np.ndarray, Callable[[pd.DataFrame], np.ndarray]]


def subsample_ols(frame: "ModelFrame", row_filter: RowFilter) -> CoefEstimate:
    """OLS on the rows selected by the filter, with the same term specs"""
    from .data import build_frame
    from .projection import residualize_frame
    from .condmean import linear_basis

    source = frame.source
    mask = row_filter(source.frame) if callable(row_filter) else row_filter
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (source.n,):
        raise FrameError("row filter must select from the frame's rows")
    if not mask.any():
        raise FrameError("subsample is empty")
    sub = build_frame(
        source.subset(mask),
        frame.config,
        mode=frame.mode,
        weights=frame.weights_column,
        cluster=frame.cluster_column,
        drop_dependent=True,
    )
    if sub.dropped_columns:
        logger.info(f"Subsample drops covariates constant on it: {list(sub.dropped_columns)}")
    rframe = residualize_frame(sub, linear_basis(sub.w_names), instrument=sub.x)
    estimate = ols_beta(rframe)
    logger.info(f"Subsample OLS on {sub.n} rows: {estimate.value:.6g}")
    return estimate
