"""
Cluster-robust inference for the one- and two-step estimators.

Every target is a scalar defined by a just-identified moment
E[w (s·a − θ·q)] = 0 stacked on top of first-step regressions
(the slope and conditional-mean fits, and in the corrected regime the
projections of X, Z, Y and the basis columns on W). The stacked Jacobian
is block triangular, so the target influence functions are formed
directly without materializing the full influence matrix.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, TYPE_CHECKING
import logging

import numpy as np
from scipy import stats

from .errors import VcovError

if TYPE_CHECKING:
    from .condmean import CondMeanFit, SlopeFit
    from .projection import ResidualizedFrame

logger = logging.getLogger(__name__)

TARGETS = ("beta_ols", "beta_c", "beta_cl", "beta_iv")
PSD_TOL = 1e-10


def cluster_count(clusters: np.ndarray, weights: np.ndarray) -> int:
    return int(np.unique(clusters[weights > 0]).size)


def small_sample_factor(n_clusters: int) -> float:
    if n_clusters < 2:
        raise VcovError(f"cluster-robust variance needs at least 2 clusters, got {n_clusters}")
    return n_clusters / (n_clusters - 1.0)


def cluster_sums(values: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    """Sum rows of values within clusters, in sorted cluster order"""
    _, inverse = np.unique(clusters, return_inverse=True)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(inverse, weights=values)
    return np.column_stack([np.bincount(inverse, weights=values[:, j]) for j in range(values.shape[1])])


def influence_vcov(psi: np.ndarray, clusters: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Clustered outer product of per-row influence contributions"""
    factor = small_sample_factor(cluster_count(clusters, weights))
    summed = cluster_sums(psi, clusters)
    if summed.ndim == 1:
        return np.array([[factor * float(summed @ summed)]])
    return factor * (summed.T @ summed)


def ratio_se(numerator: np.ndarray, denominator: np.ndarray, weights: np.ndarray, clusters: np.ndarray) -> Tuple[float, float]:
    """Ratio Σ w a / Σ w b and its delta-method SE with denominator variability"""
    den = float(np.sum(weights * denominator))
    theta = float(np.sum(weights * numerator)) / den
    psi = weights * (numerator - theta * denominator) / den
    var = influence_vcov(psi, clusters, weights)[0, 0]
    return theta, float(np.sqrt(max(var, 0.0)))


@dataclass
class _Moment:
    """s·a − θ·q with q = s·d, or q = 1 when d is None"""
    name: str
    s: np.ndarray
    s_kind: str
    d: Optional[np.ndarray]
    d_resid: bool
    y_sign: float = 0.0
    b_mult: Optional[np.ndarray] = None
    b_resid: bool = False
    alpha_sign: float = 0.0
    alpha_resid: bool = False


@dataclass
class JointVcov:
    names: List[str]
    estimates: Dict[str, float]
    vcov: np.ndarray
    regime: str
    n_clusters: int
    small_sample_factor: float
    notes: List[str] = field(default_factory=list)

    def se(self, name: str) -> float:
        j = self.names.index(name)
        return float(np.sqrt(max(self.vcov[j, j], 0.0)))

    def sub(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(name) for name in names]
        return self.vcov[np.ix_(idx, idx)]


def _moment(rframe: "ResidualizedFrame", name: str) -> _Moment:
    did = rframe.mode == "did-rd"
    d = rframe.frame.x if did else rframe.x_t
    if name == "beta_ols":
        return _Moment(name, rframe.x_t, "x", rframe.x_t, True, y_sign=1.0)
    if name == "beta_iv":
        return _Moment(name, rframe.z_t, "z", d, not did, y_sign=1.0)
    if name == "beta_c":
        return _Moment(name, rframe.z_t, "z", d, not did, b_mult=d, b_resid=not did)
    if name == "beta_cl":
        return _Moment(name, rframe.z_t, "z", d, not did, alpha_sign=1.0, alpha_resid=not did)
    if name == "rf_gap":
        return _Moment(name, rframe.z_t, "z", None, False, y_sign=1.0, alpha_sign=-1.0, alpha_resid=not did)
    raise VcovError(f"unknown inference target: {name}")


class StackedSystem:
    """Influence functions of scalar targets stacked on their first-step regressions"""

    def __init__(self, rframe: "ResidualizedFrame", slope: Optional["SlopeFit"] = None,
                 cm: Optional["CondMeanFit"] = None, regime: str = "plugin"):
        if regime not in ("plugin", "corrected"):
            raise VcovError(f"unknown SE regime: {regime}")
        if cm is not None and list(cm.basis.names) != list(rframe.basis_names):
            raise VcovError("conditional-mean basis does not match the residualized frame")
        self.rframe = rframe
        self.slope = slope
        self.cm = cm
        self.regime = regime
        self.w = rframe.weights
        self.wsum = float(self.w.sum())
        self.did = rframe.mode == "did-rd"
        self._alpha = cm.alpha_matrix(rframe.frame.w) if cm is not None else None
        self._b = slope.b_ols(rframe.frame.w) if slope is not None else None

    def _mean(self, values: np.ndarray) -> float:
        return float(np.sum(self.w * values)) / self.wsum

    def _wmean(self, matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
        return matrix.T @ (self.w * values) / self.wsum

    def _alpha_p(self) -> np.ndarray:
        p = self.rframe.p if self.did else self.rframe.p_t
        return np.sum(self._alpha * p, axis=1)

    def dependent(self, mom: _Moment) -> np.ndarray:
        rf = self.rframe
        a = np.zeros(rf.frame.n)
        if mom.y_sign:
            a = a + mom.y_sign * (rf.frame.y if self.did and mom.s_kind == "z" else rf.y_t)
        if mom.b_mult is not None:
            if self._b is None:
                raise VcovError(f"{mom.name} needs a slope fit")
            a = a + self._b * mom.b_mult
        if mom.alpha_sign:
            if self._alpha is None:
                raise VcovError(f"{mom.name} needs a conditional-mean fit")
            a = a + mom.alpha_sign * self._alpha_p()
        return a

    def influence(self, name: str) -> Tuple[float, np.ndarray]:
        """Estimate and per-row influence contribution of one target"""
        rf = self.rframe
        frame = rf.frame
        mom = _moment(rf, name)
        a = self.dependent(mom)
        s = mom.s
        q = s * mom.d if mom.d is not None else np.ones(frame.n)
        eq = self._mean(q)
        theta = self._mean(s * a) / eq
        h = s * a - theta * q
        dh_ds = a - theta * mom.d if mom.d is not None else a
        dh_dd = -theta * s if mom.d is not None else None

        corr = np.zeros(frame.n)
        wmat = frame.w
        proj = rf.projector

        def add_w_block(gradient: np.ndarray, resid: np.ndarray):
            nonlocal corr
            c = self.wsum * proj.solve_gram(gradient)
            corr = corr + (wmat @ c) * resid

        if self.regime == "corrected":
            if mom.s_kind == "z":
                add_w_block(-self._wmean(wmat, dh_ds), rf.z_t)
            g_x = np.zeros(frame.p)
            if mom.s_kind == "x":
                g_x -= self._wmean(wmat, dh_ds)
            if mom.d_resid:
                g_x -= self._wmean(wmat, dh_dd)
            if mom.b_mult is not None and mom.b_resid:
                g_x -= self._wmean(wmat, s * self._b)
            add_w_block(g_x, rf.x_t)
            if mom.y_sign and not (self.did and mom.s_kind == "z"):
                add_w_block(-mom.y_sign * self._wmean(wmat, s), rf.y_t)
            if mom.alpha_sign and mom.alpha_resid:
                for k, kind in enumerate(self.cm.basis.kinds):
                    if kind == "constant":
                        continue
                    add_w_block(-mom.alpha_sign * self._wmean(wmat, s * self._alpha[:, k]), rf.p_t[:, k])

        if mom.b_mult is not None:
            fit = self.slope.fit
            gradient = np.zeros(fit.n_coef)
            for block in fit.blocks:
                if block.kind == "linear":
                    gradient[block.coef_slice] = self._wmean(wmat[:, list(block.hetero)], s * mom.b_mult)
            c = self.wsum * fit.factor.solve(gradient)
            corr = corr + fit.design_product(c, wmat, frame.x) * fit.residuals

        if mom.alpha_sign:
            fit = self.cm
            p = rf.p if self.did else rf.p_t
            gradient = np.zeros(fit.n_coef)
            for block in fit.blocks:
                if block.kind == "constant" and not self.did:
                    continue
                gradient[block.coef_slice] = mom.alpha_sign * self._wmean(
                    wmat[:, list(block.hetero)], s * p[:, block.basis_index]
                )
            c = self.wsum * fit.factor.solve(gradient)
            corr = corr + fit.design_product(c, wmat, frame.x) * fit.residuals

        psi = self.w * (h + corr) / (self.wsum * eq)
        return theta, psi


def stacked_vcov(
    rframe: "ResidualizedFrame",
    slope: Optional["SlopeFit"] = None,
    cm: Optional["CondMeanFit"] = None,
    targets: Sequence[str] = TARGETS,
    regime: str = "plugin",
) -> JointVcov:
    """Joint cluster-robust covariance of the requested targets"""
    system = StackedSystem(rframe, slope, cm, regime)
    estimates = {}
    columns = []
    for name in targets:
        theta, psi = system.influence(name)
        estimates[name] = theta
        columns.append(psi)
    frame = rframe.frame
    n_clusters = cluster_count(frame.clusters, frame.weights)
    factor = small_sample_factor(n_clusters)
    vcov = influence_vcov(np.column_stack(columns), frame.clusters, frame.weights)
    vcov = 0.5 * (vcov + vcov.T)
    notes = ["first-stage estimation of the synthetic instrument is not propagated"]
    if regime == "plugin":
        notes.append("linear-projection residuals treated as known")
    logger.info(f"Stacked {regime} covariance for {list(targets)} over {n_clusters} clusters")
    return JointVcov(list(targets), estimates, vcov, regime, n_clusters, factor, notes)


def check_psd(vcov: np.ndarray) -> None:
    trace = float(np.trace(vcov))
    smallest = float(np.min(np.linalg.eigvalsh(0.5 * (vcov + vcov.T)))) if vcov.size else 0.0
    if smallest < -PSD_TOL * max(abs(trace), 1e-300):
        raise VcovError(f"covariance matrix is not positive semidefinite (min eigenvalue {smallest:.3e})")


def gap_component_ses(vcov: np.ndarray) -> Dict[str, float]:
    """SEs of consecutive differences of (β_OLS, β^c, β^cℓ, β_IV) and of the total gap"""
    vcov = np.asarray(vcov, dtype=float)
    if vcov.shape != (4, 4):
        raise VcovError("gap component SEs need the 4×4 joint covariance")
    check_psd(vcov)

    def diff_se(a: int, b: int) -> float:
        return float(np.sqrt(max(vcov[a, a] + vcov[b, b] - 2.0 * vcov[a, b], 0.0)))

    return {
        "covariate_weight": diff_se(1, 0),
        "treatment_level_weight": diff_se(2, 1),
        "marginal_effect": diff_se(3, 2),
        "total": diff_se(3, 0),
    }


@dataclass(frozen=True)
class DwhResult:
    statistic: float
    p_value: float
    diff: float
    se_diff: float
    reduced_form_numerator: float
    se_numerator: float
    regime: str


def dwh_test(rframe: "ResidualizedFrame", cm: "CondMeanFit", regime: str = "plugin") -> DwhResult:
    """Generalized endogeneity test through the reduced-form numerator"""
    from .estimators import check_relevance

    check_relevance(rframe)
    system = StackedSystem(rframe, None, cm, regime)
    numerator, psi = system.influence("rf_gap")
    frame = rframe.frame
    se_num = float(np.sqrt(max(influence_vcov(psi, frame.clusters, frame.weights)[0, 0], 0.0)))
    denominator = rframe.iv_denominator() / system.wsum
    diff = numerator / denominator

    scale = float(np.sqrt(np.sum((frame.weights * rframe.z_t * frame.y) ** 2))) / system.wsum
    if se_num <= 1e-10 * scale:
        statistic, p_value = float("nan"), float("nan")
        logger.warning("Reduced-form numerator has zero sampling variance; DWH statistic undefined")
    else:
        statistic = numerator / se_num
        p_value = float(2.0 * stats.norm.sf(abs(statistic)))
    logger.info(f"DWH statistic {statistic:.4f} (p={p_value:.4g})")
    return DwhResult(
        statistic=float(statistic),
        p_value=float(p_value),
        diff=float(diff),
        se_diff=se_num / abs(denominator),
        reduced_form_numerator=float(numerator),
        se_numerator=se_num,
        regime=regime,
    )
