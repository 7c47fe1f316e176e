"""
First-step models over the treatment.

The slope model regresses Y on [W, H(W)·X] and yields b_OLS(w). The
conditional-mean model regresses Y on [W, H_k(W)·p_k(X)] for a basis p_k
(constant, linear, hinges, steps at support levels) and yields
g_OLS(x, w) = Σ_k α_k(w) p_k(x). The constant basis block is W itself.
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from config import BasisConfig
from .errors import ConfigError, RankError, SupportError
from .projection import GramFactor, WeightedProjector, factorize

logger = logging.getLogger(__name__)

BASIS_KINDS = ("constant", "linear", "hinge", "step")
SUPPORT_TOL = 1e-9
DEFAULT_HETEROGENEITY = {"linear": "full", "hinge": "full", "step": "constant"}


def _fmt(value: float) -> str:
    return "%g" % value


def weighted_quantile(values: np.ndarray, weights: np.ndarray, prob: float) -> float:
    """Smallest observed value whose weighted CDF reaches prob"""
    order = np.argsort(values, kind="mergesort")
    cum = np.cumsum(weights[order])
    j = int(np.searchsorted(cum, prob * cum[-1] * (1 - 1e-12), side="left"))
    return float(values[order][min(j, len(values) - 1)])


def support_levels(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sorted distinct treatment values among rows with positive weight"""
    return np.unique(np.asarray(x, dtype=float)[np.asarray(weights) > 0])


@dataclass(frozen=True)
class BasisTerm:
    kind: str
    point: Optional[float] = None
    hetero: Tuple[int, ...] = ()

    @property
    def name(self) -> str:
        if self.kind == "constant":
            return "1"
        if self.kind == "linear":
            return "x"
        if self.kind == "hinge":
            return f"max(x-{_fmt(self.point)},0)"
        return f"1{{x>={_fmt(self.point)}}}"

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.ones_like(x)
        if self.kind == "linear":
            return x.copy()
        if self.kind == "hinge":
            return np.maximum(x - self.point, 0.0)
        return (x >= self.point - SUPPORT_TOL * max(1.0, abs(self.point))).astype(float)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered basis over x with a heterogeneity design (W column indices) per term"""
    terms: Tuple[BasisTerm, ...]

    def __post_init__(self):
        kinds = [term.kind for term in self.terms]
        for kind in kinds:
            if kind not in BASIS_KINDS:
                raise ConfigError(f"unknown basis kind: {kind}")
        if not kinds or kinds[0] != "constant" or "linear" not in kinds:
            raise ConfigError("basis must start with the constant term and contain the linear term")
        if kinds.count("constant") != 1 or kinds.count("linear") != 1:
            raise ConfigError("basis must contain exactly one constant and one linear term")

    @property
    def kinds(self) -> List[str]:
        return [term.kind for term in self.terms]

    @property
    def names(self) -> List[str]:
        return [term.name for term in self.terms]

    @property
    def steps(self) -> List[float]:
        return [term.point for term in self.terms if term.kind == "step"]

    def index(self, kind: str) -> int:
        return self.kinds.index(kind)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.column_stack([term.evaluate(x) for term in self.terms])


def hetero_indices(design: Union[str, Sequence[str]], w_names: Sequence[str]) -> Tuple[int, ...]:
    if design == "full":
        return tuple(range(len(w_names)))
    if design == "constant":
        return (0,)
    missing = [name for name in design if name not in w_names]
    if missing:
        raise ConfigError(f"heterogeneity design names unknown covariate columns: {missing}")
    return tuple(sorted(w_names.index(name) for name in design))


def linear_basis(w_names: Sequence[str], hetero: Union[str, Sequence[str]] = "full") -> BasisSpec:
    p = len(w_names)
    return BasisSpec((
        BasisTerm("constant", hetero=tuple(range(p))),
        BasisTerm("linear", hetero=hetero_indices(hetero, w_names)),
    ))


def make_basis(
    w_names: Sequence[str],
    hinge_knots: Sequence[float] = (),
    steps: Sequence[float] = (),
    heterogeneity: Optional[dict] = None,
) -> BasisSpec:
    """Explicit basis: constant, linear, the given hinges and the given steps"""
    hetero = dict(DEFAULT_HETEROGENEITY)
    hetero.update(heterogeneity or {})
    p = len(w_names)
    terms = [
        BasisTerm("constant", hetero=tuple(range(p))),
        BasisTerm("linear", hetero=hetero_indices(hetero["linear"], w_names)),
    ]
    terms += [BasisTerm("hinge", float(k), hetero_indices(hetero["hinge"], w_names)) for k in hinge_knots]
    terms += [BasisTerm("step", float(t), hetero_indices(hetero["step"], w_names)) for t in steps]
    return BasisSpec(tuple(terms))


def default_basis(x: np.ndarray, weights: np.ndarray, w_names: Sequence[str], config: Optional[BasisConfig] = None) -> BasisSpec:
    """Constant + linear + hinge at the weighted median + steps above the minimum support level"""
    config = config or BasisConfig()
    levels = support_levels(x, weights)
    lo, hi = levels[0], levels[-1]

    if config.hinge_knots is None:
        median = weighted_quantile(x, weights, 0.5)
        knots = [median] if lo < median < hi else []
        if not knots:
            logger.info(f"Weighted median treatment level {median:g} is a support endpoint; no default hinge")
    else:
        knots = list(config.hinge_knots)
        outside = [k for k in knots if not lo < k < hi]
        if outside:
            raise SupportError(f"hinge knots {outside} lie outside the open treatment range ({lo:g}, {hi:g})")

    thresholds: List[float] = []
    if config.steps:
        if config.step_quantiles:
            cuts = [weighted_quantile(x, weights, j / config.step_quantiles) for j in range(1, config.step_quantiles)]
            thresholds = sorted({c for c in cuts if c > lo})
        else:
            absorbed = _absorbed_steps(levels, knots, config.heterogeneity, w_names)
            thresholds = [float(v) for v in levels[1:] if float(v) not in absorbed]
    return make_basis(w_names, knots, thresholds, config.heterogeneity)


def _absorbed_steps(levels: np.ndarray, knots: Sequence[float], heterogeneity: Optional[dict], w_names: Sequence[str]) -> set:
    """Step levels already spanned by the constant, the linear term and the hinges on a discrete support

    x is constant plus a sum of steps, so the step at the first level above the
    minimum adds nothing; each hinge does the same for the first level above
    its knot. Only dropped when the step heterogeneity is covered by that term.
    """
    hetero = dict(DEFAULT_HETEROGENEITY)
    hetero.update(heterogeneity or {})
    step = set(hetero_indices(hetero["step"], w_names))
    absorbed = set()
    if len(levels) > 1 and step <= set(hetero_indices(hetero["linear"], w_names)):
        absorbed.add(float(levels[1]))
    if step <= set(hetero_indices(hetero["hinge"], w_names)):
        for knot in knots:
            above = levels[levels > knot]
            if len(above):
                absorbed.add(float(above[0]))
    return absorbed


def check_support(basis: BasisSpec, levels: np.ndarray) -> None:
    lo = levels[0]
    for t in basis.steps:
        matched = np.any(np.abs(levels - t) <= SUPPORT_TOL * max(1.0, abs(t)))
        if not matched or t <= lo:
            raise SupportError(f"step threshold {t:g} is not a support level above the minimum {lo:g}")


@dataclass(frozen=True)
class CoefBlock:
    kind: str
    basis_index: int
    coef_slice: slice
    hetero: Tuple[int, ...]


@dataclass
class CondMeanFit:
    basis: BasisSpec
    coef: np.ndarray
    blocks: List[CoefBlock]
    names: List[str]
    factor: GramFactor
    fitted: np.ndarray
    residuals: np.ndarray
    support: np.ndarray
    pruned: List[str] = field(default_factory=list)

    @property
    def n_coef(self) -> int:
        return len(self.coef)

    def alpha_matrix(self, w: np.ndarray, coef: Optional[np.ndarray] = None) -> np.ndarray:
        """α_k(w) for every basis term, one row per covariate row"""
        coef = self.coef if coef is None else coef
        w = np.atleast_2d(np.asarray(w, dtype=float))
        alpha = np.zeros((w.shape[0], len(self.basis.terms)))
        for block in self.blocks:
            alpha[:, block.basis_index] = w[:, list(block.hetero)] @ coef[block.coef_slice]
        return alpha

    def design_product(self, coef: np.ndarray, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Stacked design times a coefficient vector, without building the design"""
        return np.sum(self.alpha_matrix(w, coef) * self.basis.evaluate(x), axis=1)

    def g(self, x, w) -> np.ndarray:
        """ĝ_OLS at paired (x, w) rows; a single w row broadcasts over x"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        alpha = self.alpha_matrix(w)
        if alpha.shape[0] == 1 and len(x) > 1:
            alpha = np.repeat(alpha, len(x), axis=0)
        return np.sum(alpha * self.basis.evaluate(x), axis=1)

    def marginal(self, x: float, w) -> float:
        return predict_marginal(self, x, w)


@dataclass
class SlopeFit:
    fit: CondMeanFit

    @property
    def gamma_a(self) -> np.ndarray:
        return self.fit.coef[: self.fit.blocks[0].coef_slice.stop]

    @property
    def gamma_b(self) -> np.ndarray:
        return self.fit.coef[self._linear.coef_slice]

    @property
    def hetero(self) -> Tuple[int, ...]:
        return self._linear.hetero

    @property
    def _linear(self) -> CoefBlock:
        return next(block for block in self.fit.blocks if block.kind == "linear")

    def b_ols(self, w: np.ndarray) -> np.ndarray:
        """b̂_OLS(w) = H(w)'γ_B"""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return w[:, list(self.hetero)] @ self.gamma_b


def _stacked_design(frame, basis: BasisSpec) -> Tuple[np.ndarray, List[str], List[Tuple[int, int]]]:
    """[W, H_k·p_k(X) for non-constant k]; origin (basis index, W column) per column"""
    p_values = basis.evaluate(frame.x)
    columns = [frame.w]
    names = list(frame.w_names)
    origin = [(0, j) for j in range(frame.p)]
    for k, term in enumerate(basis.terms):
        if term.kind == "constant":
            continue
        idx = list(term.hetero)
        columns.append(frame.w[:, idx] * p_values[:, [k]])
        names.extend(f"{frame.w_names[j]}*{term.name}" if j else term.name for j in idx)
        origin.extend((k, j) for j in idx)
    return np.column_stack(columns), names, origin


def _prune(basis: BasisSpec, origin: List[Tuple[int, int]], drop: set) -> BasisSpec:
    keep_by_term = {}
    for j, (k, col) in enumerate(origin):
        if j not in drop:
            keep_by_term.setdefault(k, []).append(col)
    terms = [replace(term, hetero=tuple(keep_by_term[k])) for k, term in enumerate(basis.terms) if k in keep_by_term]
    return BasisSpec(tuple(terms))


def _fit(frame, basis: BasisSpec, prune_steps: bool) -> CondMeanFit:
    design, names, origin = _stacked_design(frame, basis)
    pruned: List[str] = []
    factor, dependent = factorize(design, frame.weights)
    if dependent:
        hard = [j for j in dependent if basis.terms[origin[j][0]].kind != "step" or not prune_steps]
        if hard:
            columns = [names[j] for j in hard]
            logger.error(f"First-step design rank deficient: {columns}")
            raise RankError(f"first-step design is rank deficient; dependent columns: {', '.join(columns)}", columns)
        pruned = [names[j] for j in dependent]
        logger.warning(f"Pruning step columns dependent on the rest of the basis: {pruned}")
        basis = _prune(basis, origin, set(dependent))
        design, names, origin = _stacked_design(frame, basis)
        factor = None

    projector = WeightedProjector(design, frame.weights, names, factor)
    result = projector.project(frame.y)

    blocks = [CoefBlock("constant", 0, slice(0, frame.p), tuple(range(frame.p)))]
    start = frame.p
    for k, term in enumerate(basis.terms):
        if term.kind == "constant":
            continue
        stop = start + len(term.hetero)
        blocks.append(CoefBlock(term.kind, k, slice(start, stop), term.hetero))
        start = stop

    return CondMeanFit(
        basis=basis,
        coef=result.coefficients,
        blocks=blocks,
        names=names,
        factor=projector.factor,
        fitted=result.fitted,
        residuals=result.residuals,
        support=support_levels(frame.x, frame.weights),
        pruned=pruned,
    )


def fit_slope_model(frame, hetero_design: Union[str, Sequence[str]] = "full") -> SlopeFit:
    """Weighted regression of Y on [W, H(W)·X]"""
    basis = linear_basis(frame.w_names, hetero_design)
    slope = SlopeFit(_fit(frame, basis, prune_steps=False))
    logger.info(f"Fitted slope model with {len(slope.hetero)} heterogeneity columns")
    return slope


def fit_condmean_model(frame, basis: Optional[BasisSpec] = None) -> CondMeanFit:
    """Weighted regression of Y on the heterogeneity-interacted basis; steps may be pruned"""
    if basis is None:
        basis = default_basis(frame.x, frame.weights, frame.w_names, frame.config.basis)
    check_support(basis, support_levels(frame.x, frame.weights))
    fit = _fit(frame, basis, prune_steps=True)
    logger.info(f"Fitted conditional-mean model: {len(fit.basis.terms)} basis terms, {fit.n_coef} coefficients")
    return fit


def predict_marginal(fit: CondMeanFit, x: float, w) -> float:
    """(ĝ(x, w) − ĝ(x − δ, w)) / δ with δ the gap to the previous support level"""
    levels = fit.support
    if not levels[0] < x <= levels[-1] + SUPPORT_TOL * max(1.0, abs(levels[-1])):
        raise SupportError(f"treatment level {x:g} is outside ({levels[0]:g}, {levels[-1]:g}]")
    previous = float(levels[levels < x - SUPPORT_TOL * max(1.0, abs(x))][-1])
    values = fit.g([x, previous], w)
    return float((values[0] - values[1]) / (x - previous))
