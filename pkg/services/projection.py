"""
Weighted linear projection L(R|W) and residualization.

All estimators share this kernel. Designs are factorized once with a
column-pivoted Householder QR of diag(sqrt(w)) W D^{-1} (D the column
norms). Only the k × k triangular factor is kept; projections use the
corrected seminormal equations, one refinement step through R'R.
Normal equations are never formed.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, TYPE_CHECKING
import logging

import numpy as np
from scipy import linalg

from .errors import RankError

if TYPE_CHECKING:
    from .data import ModelFrame

logger = logging.getLogger(__name__)

TAU_RANK = 1e-8
TAU_ORTHO = 1e-8


def _scaled(matrix: np.ndarray, weights: Optional[np.ndarray], scale: Optional[np.ndarray] = None) -> np.ndarray:
    """diag(sqrt(w)) A D^{-1} in Fortran order, ready for in-place LAPACK factorization"""
    matrix = np.asarray(matrix, dtype=float)
    out = np.empty(matrix.shape, order="F")
    if weights is None:
        out[...] = matrix
    else:
        np.multiply(matrix, np.sqrt(weights)[:, None], out=out)
    if scale is not None:
        out /= scale
    return out


def _triangular(a: np.ndarray, pivoting: bool):
    """R (and the pivot order) of a, overwriting a"""
    k = a.shape[1]
    if pivoting:
        (qr, _), _, perm = linalg.qr(a, mode="raw", pivoting=True, overwrite_a=True, check_finite=False)
    else:
        (qr, _), _ = linalg.qr(a, mode="raw", overwrite_a=True, check_finite=False)
        perm = np.arange(k)
    r = np.triu(qr[: min(k, qr.shape[0]), :])
    return r, perm


def dependent_columns(matrix: np.ndarray, weights: Optional[np.ndarray] = None, tol: float = TAU_RANK) -> List[int]:
    """Indices of columns whose residual on the preceding columns is below tol times their own norm"""
    a = _scaled(matrix, weights)
    n, k = a.shape
    if k == 0:
        return []
    norms = np.linalg.norm(a, axis=0)
    r, _ = _triangular(a, pivoting=False)
    diag = np.abs(np.diag(r))
    dependent = []
    for j in range(k):
        if j >= len(diag) or norms[j] == 0.0 or diag[j] < tol * norms[j]:
            dependent.append(j)
    return dependent


@dataclass(frozen=True)
class GramFactor:
    """Pivoted triangular factor of diag(sqrt(w)) W D^{-1}: W'diag(w)W = D P R'R P' D"""
    r: np.ndarray
    perm: np.ndarray
    scale: np.ndarray

    @property
    def k(self) -> int:
        return len(self.scale)

    def solve(self, vector: np.ndarray) -> np.ndarray:
        """(W' diag(w) W)^{-1} v for a vector or the columns of a matrix"""
        vector = np.asarray(vector, dtype=float)
        u = vector / self.scale if vector.ndim == 1 else vector / self.scale[:, None]
        y = linalg.solve_triangular(self.r, u[self.perm], trans="T", check_finite=False)
        z = linalg.solve_triangular(self.r, y, check_finite=False)
        out = np.empty_like(z)
        out[self.perm] = z
        return out / self.scale if out.ndim == 1 else out / self.scale[:, None]


def factorize(design: np.ndarray, weights: np.ndarray, tol: float = TAU_RANK) -> Tuple[GramFactor, List[int]]:
    """One pivoted QR of the weighted design; dependent columns are named in sequential order"""
    design = np.asarray(design, dtype=float)
    k = design.shape[1]
    norms = np.sqrt(np.einsum("i,ij,ij->j", np.asarray(weights, dtype=float), design, design))
    scale = np.where(norms > 0.0, norms, 1.0)
    r, perm = _triangular(_scaled(design, weights, scale), pivoting=True)
    diag = np.abs(np.diag(r)) if r.size else np.zeros(0)
    flagged = [int(perm[j]) for j in range(k) if j >= len(diag) or diag[j] < tol]
    dependent: List[int] = []
    if flagged:
        dependent = dependent_columns(design, weights, tol) or sorted(flagged)
    return GramFactor(r, np.asarray(perm), scale), dependent


@dataclass(frozen=True)
class ProjectionResult:
    coefficients: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray


class WeightedProjector:
    """Factorized weighted least squares on a fixed design; holds the design by reference"""

    def __init__(
        self,
        design: np.ndarray,
        weights: np.ndarray,
        names: Optional[Sequence[str]] = None,
        factor: Optional[GramFactor] = None,
    ):
        self.design = np.asarray(design, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.names = list(names) if names is not None else [f"col{j}" for j in range(self.design.shape[1])]
        if factor is not None:
            self.factor, dependent = factor, []
        else:
            self.factor, dependent = factorize(self.design, self.weights)
        if dependent:
            columns = [self.names[j] for j in dependent]
            logger.error(f"Projection design rank deficient: {columns}")
            raise RankError(f"design is rank deficient; pivoted-out columns: {', '.join(columns)}", columns)

    @property
    def k(self) -> int:
        return self.design.shape[1]

    def _weighted_cross(self, target: np.ndarray) -> np.ndarray:
        weighted = self.weights * target if target.ndim == 1 else self.weights[:, None] * target
        return self.design.T @ weighted

    def coefficients(self, target: np.ndarray) -> np.ndarray:
        target = np.asarray(target, dtype=float)
        coef = self.factor.solve(self._weighted_cross(target))
        return coef + self.factor.solve(self._weighted_cross(target - self.design @ coef))

    def project(self, target: np.ndarray) -> ProjectionResult:
        target = np.asarray(target, dtype=float)
        coef = self.coefficients(target)
        fitted = self.design @ coef
        return ProjectionResult(coef, fitted, target - fitted)

    def residuals(self, target: np.ndarray) -> np.ndarray:
        return self.project(target).residuals

    def solve_gram(self, vector: np.ndarray) -> np.ndarray:
        """(W' diag(w) W)^{-1} v through the triangular factor"""
        return self.factor.solve(vector)


def wls_project(target: np.ndarray, design: np.ndarray, weights: np.ndarray) -> ProjectionResult:
    return WeightedProjector(design, weights).project(target)


def orthogonality_gap(residuals: np.ndarray, design: np.ndarray, weights: np.ndarray) -> float:
    """Largest weighted inner product of a residual with a design column, relative to the bound"""
    worst = 0.0
    scale = np.max(np.abs(residuals)) if residuals.size else 0.0
    if scale == 0.0:
        return 0.0
    for j in range(design.shape[1]):
        col = design[:, j]
        bound = weights.sum() * np.max(np.abs(col)) * scale
        if bound > 0:
            worst = max(worst, abs(np.sum(weights * col * residuals)) / bound)
    return worst


def covariate_projector(frame: "ModelFrame") -> WeightedProjector:
    return WeightedProjector(frame.w, frame.weights, frame.w_names)


@dataclass(frozen=True)
class ResidualizedFrame:
    frame: "ModelFrame"
    projector: WeightedProjector
    y_t: np.ndarray
    x_t: np.ndarray
    z: np.ndarray
    z_t: np.ndarray
    p: np.ndarray
    p_t: np.ndarray
    basis_names: List[str]

    @property
    def mode(self) -> str:
        return self.frame.mode

    @property
    def weights(self) -> np.ndarray:
        return self.frame.weights

    @property
    def iv_regressor(self) -> np.ndarray:
        """X̃ in standard mode, unresidualized X in did-rd mode"""
        return self.frame.x if self.mode == "did-rd" else self.x_t

    def iv_denominator(self) -> float:
        return float(np.sum(self.weights * self.iv_regressor * self.z_t))


def residualize_frame(
    frame: "ModelFrame",
    basis,
    instrument: Optional[np.ndarray] = None,
    projector: Optional[WeightedProjector] = None,
) -> ResidualizedFrame:
    """Residualize Y, X, the synthetic instrument and every basis column on W"""
    if instrument is None:
        from .estimators import make_synthetic_instrument
        instrument = make_synthetic_instrument(frame)
    if projector is None:
        projector = covariate_projector(frame)
    p = basis.evaluate(frame.x)
    stacked = np.column_stack([frame.y, frame.x, instrument, p])
    resid = projector.residuals(stacked)
    p_t = resid[:, 3:]
    for k, kind in enumerate(basis.kinds):
        if kind == "constant":
            p_t[:, k] = 0.0
    logger.info(f"Residualized frame on {frame.p} covariates with {p.shape[1]} basis columns")
    return ResidualizedFrame(
        frame=frame,
        projector=projector,
        y_t=resid[:, 0],
        x_t=resid[:, 1],
        z=np.asarray(instrument, dtype=float),
        z_t=resid[:, 2],
        p=p,
        p_t=p_t,
        basis_names=list(basis.names),
    )
