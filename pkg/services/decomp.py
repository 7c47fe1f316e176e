"""
IV-weighted OLS coefficients and the three-component IV–OLS gap decomposition.

    β_IV − β_OLS = (β^c − β_OLS) + (β^cℓ − β^c) + (β_IV − β^cℓ)

covariate weights, treatment-level weights, marginal effects.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union
import logging

import numpy as np
import pandas as pd

from .condmean import BasisSpec, CondMeanFit, SlopeFit, fit_condmean_model, fit_slope_model
from .data import check_did_cells
from .errors import FrameError
from .estimators import CoefEstimate, check_relevance, iv_beta, make_synthetic_instrument, ols_beta
from .inference import TARGETS, gap_component_ses, stacked_vcov
from .projection import ResidualizedFrame, WeightedProjector, covariate_projector, residualize_frame

logger = logging.getLogger(__name__)

R2_DID = 1 - 1e-8
COMPONENTS = ("covariate_weight", "treatment_level_weight", "marginal_effect")


def beta_ols_c(rframe: ResidualizedFrame, slope: SlopeFit, regime: str = "plugin") -> CoefEstimate:
    """Σ w b̂_OLS(W) d Z̃ / Σ w d Z̃ with d = X̃ (standard) or X (did-rd)"""
    denominator = check_relevance(rframe)
    d = rframe.iv_regressor
    b = slope.b_ols(rframe.frame.w)
    value = float(np.sum(rframe.weights * b * d * rframe.z_t)) / denominator
    se = stacked_vcov(rframe, slope, None, ["beta_c"], regime).se("beta_c")
    return CoefEstimate(value, se, denominator)


def beta_ols_cl(rframe: ResidualizedFrame, cm: CondMeanFit, regime: str = "plugin") -> CoefEstimate:
    """Σ w Σ_k α̂_k(W) P̃_k Z̃ / Σ w X̃ Z̃; unresidualized P and X in did-rd mode"""
    if list(cm.basis.names) != list(rframe.basis_names):
        raise FrameError("conditional-mean basis does not match the residualized frame")
    denominator = check_relevance(rframe)
    alpha = cm.alpha_matrix(rframe.frame.w)
    p = rframe.p if rframe.mode == "did-rd" else rframe.p_t
    value = float(np.sum(rframe.weights * np.sum(alpha * p, axis=1) * rframe.z_t)) / denominator
    se = stacked_vcov(rframe, None, cm, ["beta_cl"], regime).se("beta_cl")
    return CoefEstimate(value, se, denominator)


def _instrument_r2(frame, instrument: np.ndarray, projector: WeightedProjector) -> float:
    weights = frame.weights
    resid = projector.residuals(instrument)
    centered = instrument - np.sum(weights * instrument) / weights.sum()
    total = float(np.sum(weights * centered ** 2))
    if total == 0.0:
        return 1.0
    return 1.0 - float(np.sum(weights * resid ** 2)) / total


def _row_patterns(w: np.ndarray) -> Optional[np.ndarray]:
    """Pattern index per row, or None when there are more than n/2 patterns

    Rows are keyed on their pandas hash; hash collisions only merge patterns,
    so the count test is safe and the grouping is verified exactly.
    """
    key = pd.util.hash_pandas_object(pd.DataFrame(w, copy=False), index=False).to_numpy()
    _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    if len(first) > w.shape[0] / 2:
        return None
    inverse = inverse.ravel()
    if not np.array_equal(w, w[first[inverse]]):
        _, inverse = np.unique(w, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        if inverse.max() + 1 > w.shape[0] / 2:
            return None
    return inverse


def _constant_within_patterns(frame) -> bool:
    positive = frame.weights > 0
    w = frame.w[positive]
    inverse = _row_patterns(w)
    if inverse is None:
        return False
    n_patterns = int(inverse.max()) + 1
    for j in range(frame.m):
        z = frame.z_raw[positive, j]
        lo = np.full(n_patterns, np.inf)
        hi = np.full(n_patterns, -np.inf)
        np.minimum.at(lo, inverse, z)
        np.maximum.at(hi, inverse, z)
        if np.any(hi - lo > 1e-12 * max(1.0, float(np.max(np.abs(z))))):
            return False
    return True


def resolve_mode(frame, instrument: Optional[np.ndarray] = None, projector: Optional[WeightedProjector] = None):
    """Detect Var(Z|W) = 0 and switch to did-rd mode; declared standard mode is refused there"""
    if frame.mode == "did-rd":
        return frame
    if instrument is None:
        instrument = make_synthetic_instrument(frame)
    if projector is None:
        projector = covariate_projector(frame)
    r2 = _instrument_r2(frame, instrument, projector)
    degenerate = r2 > R2_DID or _constant_within_patterns(frame)
    if not degenerate:
        return frame
    if frame.mode_source == "declared":
        logger.error(f"Instrument is a function of the covariates (R²={r2:.10f}) in declared standard mode")
        raise FrameError("instrument is a function of the covariates; use did-rd mode")
    logger.warning(f"Instrument is a function of the covariates (R²={r2:.10f}); forcing did-rd mode")
    return frame.with_mode("did-rd", "forced", check_did_cells(frame.source, frame.config, frame.z_raw))


@dataclass
class FittedModels:
    """First-step fits shared by the coefficients, weights and the DWH test"""
    frame: object
    rframe: ResidualizedFrame
    slope: SlopeFit
    cm: CondMeanFit


def fit_models(
    frame,
    slope_design: Optional[Union[str, Sequence[str]]] = None,
    basis: Optional[BasisSpec] = None,
) -> FittedModels:
    instrument = make_synthetic_instrument(frame)
    projector = covariate_projector(frame)
    frame = resolve_mode(frame, instrument, projector)
    slope = fit_slope_model(frame, slope_design if slope_design is not None else frame.config.slope_design)
    cm = fit_condmean_model(frame, basis)
    rframe = residualize_frame(frame, cm.basis, instrument, projector)
    check_relevance(rframe)
    return FittedModels(frame, rframe, slope, cm)


@dataclass
class DecompositionResult:
    beta_ols: CoefEstimate
    beta_c: CoefEstimate
    beta_cl: CoefEstimate
    beta_iv: CoefEstimate
    components: Dict[str, float]
    total: float
    joint_vcov: np.ndarray
    component_ses: Dict[str, float]
    mode: str
    mode_source: str
    regime: str
    n: int
    n_clusters: int
    basis: List[str]
    pruned: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    se_comparison: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fits: Optional[FittedModels] = field(default=None, repr=False, compare=False)

    @property
    def coefficients(self) -> Dict[str, CoefEstimate]:
        return {"beta_ols": self.beta_ols, "beta_c": self.beta_c, "beta_cl": self.beta_cl, "beta_iv": self.beta_iv}

    def to_dict(self) -> dict:
        return {
            "coefficients": {name: est.to_dict() for name, est in self.coefficients.items()},
            "components": {name: {"value": self.components[name], "se": self.component_ses[name]} for name in COMPONENTS},
            "total_gap": {"value": self.total, "se": self.component_ses["total"]},
            "joint_vcov": {"order": list(TARGETS), "matrix": self.joint_vcov.tolist()},
            "mode": self.mode,
            "mode_source": self.mode_source,
            "se_regime": self.regime,
            "n": self.n,
            "n_clusters": self.n_clusters,
            "basis": self.basis,
            "pruned_columns": self.pruned,
            "notes": self.notes,
            "se_comparison": self.se_comparison,
        }


def decompose(
    frame,
    slope_design: Optional[Union[str, Sequence[str]]] = None,
    basis: Optional[BasisSpec] = None,
    regime: str = "plugin",
    compare_se: bool = False,
) -> DecompositionResult:
    """All four coefficients on one residualized frame, their joint covariance and the gap components

    compare_se adds the corrected-regime SEs next to the plugin ones (standard mode only).
    """
    try:
        fits = fit_models(frame, slope_design, basis)
        frame, rframe, slope, cm = fits.frame, fits.rframe, fits.slope, fits.cm
        joint = stacked_vcov(rframe, slope, cm, TARGETS, regime)
        ols = ols_beta(rframe)
        iv = iv_beta(rframe)
        denominator = iv.denominator
        b = slope.b_ols(frame.w)
        alpha = cm.alpha_matrix(frame.w)
        p = rframe.p if frame.mode == "did-rd" else rframe.p_t
        d = rframe.iv_regressor
        c_value = float(np.sum(frame.weights * b * d * rframe.z_t)) / denominator
        cl_value = float(np.sum(frame.weights * np.sum(alpha * p, axis=1) * rframe.z_t)) / denominator
    except Exception as e:
        logger.error(f"Decomposition failed: {str(e)}")
        raise

    estimates = {
        "beta_ols": CoefEstimate(ols.value, joint.se("beta_ols"), ols.denominator),
        "beta_c": CoefEstimate(c_value, joint.se("beta_c"), denominator),
        "beta_cl": CoefEstimate(cl_value, joint.se("beta_cl"), denominator),
        "beta_iv": CoefEstimate(iv.value, joint.se("beta_iv"), denominator),
    }
    components = {
        "covariate_weight": c_value - ols.value,
        "treatment_level_weight": cl_value - c_value,
        "marginal_effect": iv.value - cl_value,
    }
    ses = gap_component_ses(joint.vcov)

    comparison = {}
    if compare_se and regime == "plugin" and frame.mode == "standard":
        corrected = stacked_vcov(rframe, slope, cm, TARGETS, "corrected")
        comparison = {name: {"plugin": joint.se(name), "corrected": corrected.se(name)} for name in TARGETS}
        worst = max(abs(v["plugin"] - v["corrected"]) / max(v["corrected"], 1e-300) for v in comparison.values())
        logger.info(f"Plugin vs corrected SEs: largest relative difference {worst:.3%}")

    result = DecompositionResult(
        beta_ols=estimates["beta_ols"],
        beta_c=estimates["beta_c"],
        beta_cl=estimates["beta_cl"],
        beta_iv=estimates["beta_iv"],
        components=components,
        total=iv.value - ols.value,
        joint_vcov=joint.vcov,
        component_ses=ses,
        mode=frame.mode,
        mode_source=frame.mode_source,
        regime=regime,
        n=frame.n,
        n_clusters=joint.n_clusters,
        basis=list(cm.basis.names),
        pruned=list(cm.pruned),
        notes=list(joint.notes),
        se_comparison=comparison,
        fits=fits,
    )
    logger.info(
        f"Decomposition ({frame.mode}): OLS={ols.value:.6g}, c={c_value:.6g}, cl={cl_value:.6g}, IV={iv.value:.6g}"
    )
    return result
