"""
Discrete synthetic populations.

A population is a finite list of atoms (w, u, z, x) with probabilities and a
structural outcome table g over treatment levels. Every moment is an exact
pmf-weighted sum over atoms, so the weights, the identities and the sample
estimators applied to the population itself can be checked to rounding error.
The same populations drive the sampler and the Monte Carlo studies.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError, root_validator, validator
from scipy import stats

from config import ModelConfig
from .condmean import make_basis, support_levels
from .data import Dataset, build_frame, dataset_from_frame
from .decomp import DecompositionResult, decompose
from .errors import ConfigError, IvGapError
from .inference import dwh_test
from .projection import WeightedProjector
from .weights import group_weights, treatment_level_weights

logger = logging.getLogger(__name__)

MAX_ATOMS = 1_000_000
PMF_TOL = 1e-14
IDENTITY_TOL = 1e-12
ESTIMATOR_TOL = 1e-10
ZERO_TOL = 1e-14
REGIMES = ("separable-valid", "separable-invalid", "nonseparable", "did-rd")
MC_TARGETS = ("beta_ols", "beta_c", "beta_cl", "beta_iv", "dwh")
RNG_NAME = "numpy PCG64 via SeedSequence.spawn"


def _fmt(value: float) -> str:
    return "%g" % value


def cell_label(w: Sequence[float]) -> str:
    return "_".join(_fmt(v) for v in w) if len(w) else "all"


class Atom(BaseModel):
    w: List[float] = []
    u: float = 0.0
    z: float
    x: float
    p: float

    @validator("p")
    def _check_p(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("atom probability must lie in [0, 1]")
        return value


class StructuralRow(BaseModel):
    """g(x, w) (or g(x, w, u)) at every treatment level for one cell"""
    w: List[float] = []
    u: Optional[float] = None
    values: List[float]


class DiscreteDgp(BaseModel):
    name: str
    mode: str = "standard"
    separable: bool = True
    instrument_exogenous: bool = True
    w_columns: List[str] = []
    levels: List[float]
    atoms: List[Atom]
    structural: List[StructuralRow]
    model: ModelConfig

    @validator("mode")
    def _check_mode(cls, value):
        if value not in ("standard", "did-rd"):
            raise ValueError("population mode must be 'standard' or 'did-rd'")
        return value

    @validator("levels")
    def _check_levels(cls, value):
        if len(value) < 2:
            raise ValueError("at least two treatment levels are required")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("treatment levels must be strictly increasing")
        return value

    @validator("atoms")
    def _check_atoms(cls, value):
        if not value:
            raise ValueError("population has no atoms")
        if len(value) > MAX_ATOMS:
            raise ValueError(f"population has {len(value)} atoms; at most {MAX_ATOMS} are supported")
        return value

    @root_validator(skip_on_failure=True)
    def _check_population(cls, values):
        model, atoms, levels = values["model"], values["atoms"], values["levels"]
        w_columns, separable = values["w_columns"], values["separable"]

        terms = model.instruments
        if len(terms) != 1 or terms[0].kind != "numeric":
            raise ValueError("populations carry exactly one numeric instrument column")
        emitted = {model.outcome, model.treatment, terms[0].columns[0], "u", *w_columns}
        if model.cell:
            emitted.add(model.cell)
        if model.weights:
            raise ValueError("population models take their weights from the pmf; drop 'weights'")
        unknown = sorted(set(model.schema()) - emitted)
        if unknown:
            raise ValueError(f"model references columns the population does not emit: {unknown}")

        width = len(w_columns)
        if any(len(atom.w) != width for atom in atoms):
            raise ValueError(f"every atom needs {width} covariate values")
        grid = np.asarray(levels, dtype=float)
        x = np.array([atom.x for atom in atoms])
        off = np.min(np.abs(x[:, None] - grid[None, :]), axis=1) > IDENTITY_TOL * np.maximum(1.0, np.abs(x))
        if off.any():
            raise ValueError(f"atom treatment values {sorted(set(x[off]))} are not among the levels")
        p = np.array([atom.p for atom in atoms])
        if abs(p.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"atom probabilities sum to {p.sum():.17g}, not 1")

        table = {}
        for row in values["structural"]:
            if len(row.w) != width or len(row.values) != len(levels):
                raise ValueError("structural rows need one value per covariate column and per level")
            if not separable and row.u is None:
                raise ValueError("nonseparable structural rows need a 'u' value")
            table[(tuple(row.w), row.u if not separable else None)] = row.values
        needed = {(tuple(atom.w), atom.u if not separable else None) for atom in atoms}
        uncovered = needed - set(table)
        if uncovered:
            raise ValueError(f"structural table misses cells {sorted(uncovered, key=str)[:5]}")

        keys = [tuple(atom.w) for atom in atoms]
        cells = {key: c for c, key in enumerate(sorted(set(keys)))}
        codes = np.array([cells[key] for key in keys])
        mass = np.bincount(codes, weights=p)
        if separable:
            u = np.array([atom.u for atom in atoms])
            eu = np.bincount(codes, weights=p * u)
            scale = max(1.0, float(np.max(np.abs(u))))
            bad = np.abs(eu) > IDENTITY_TOL * scale * np.maximum(mass, 1e-300)
            if np.any(bad & (mass > 0)):
                raise ValueError("separable populations need E(U | W) = 0 in every cell")
        if values["mode"] == "did-rd":
            z = np.array([atom.z for atom in atoms])
            lo = np.full(len(cells), np.inf)
            hi = np.full(len(cells), -np.inf)
            np.minimum.at(lo, codes, z)
            np.maximum.at(hi, codes, z)
            if np.any(hi - lo > 0):
                raise ValueError("did-rd populations need an instrument constant within each cell")
        return values

    @property
    def instrument(self) -> str:
        return self.model.instruments[0].columns[0]

    def structural_value(self, w: Sequence[float], u: Optional[float] = None) -> List[float]:
        for row in self.structural:
            if tuple(row.w) == tuple(w) and (self.separable or row.u == u):
                return row.values
        raise ConfigError(f"no structural row for cell {cell_label(w)}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DiscreteDgp":
        try:
            with Path(path).open("r", encoding="utf-8") as f:
                payload = json.load(f)
            dgp = cls.parse_obj(payload)
        except FileNotFoundError:
            logger.error(f"Population description not found: {path}")
            raise ConfigError(f"population description not found: {path}")
        except json.JSONDecodeError as e:
            logger.error(f"Failed to parse population description: {str(e)}")
            raise ConfigError(f"population description is not valid JSON: {str(e)}")
        except ValidationError as e:
            logger.error(f"Invalid population description: {str(e)}")
            raise ConfigError(f"invalid population description: {str(e)}")
        logger.info(f"Loaded population '{dgp.name}' with {len(dgp.atoms)} atoms")
        return dgp


def atom_table(dgp: DiscreteDgp) -> pd.DataFrame:
    """One row per atom: outcome, treatment, instrument, covariates, u, cell label and pmf"""
    model = dgp.model
    w = np.array([atom.w for atom in dgp.atoms], dtype=float).reshape(len(dgp.atoms), len(dgp.w_columns))
    x = np.array([atom.x for atom in dgp.atoms])
    u = np.array([atom.u for atom in dgp.atoms])
    levels = np.asarray(dgp.levels, dtype=float)
    level_index = np.argmin(np.abs(x[:, None] - levels[None, :]), axis=1)

    y = np.empty(len(dgp.atoms))
    lookup: Dict[Tuple, np.ndarray] = {}
    for row in dgp.structural:
        lookup[(tuple(row.w), None if dgp.separable else row.u)] = np.asarray(row.values, dtype=float)
    for i, atom in enumerate(dgp.atoms):
        g = lookup[(tuple(atom.w), None if dgp.separable else atom.u)]
        y[i] = g[level_index[i]] + (atom.u if dgp.separable else 0.0)

    table = pd.DataFrame({model.outcome: y, model.treatment: levels[level_index], dgp.instrument: [a.z for a in dgp.atoms]})
    for j, column in enumerate(dgp.w_columns):
        table[column] = w[:, j]
    table["u"] = u
    if model.cell and model.cell not in table.columns:
        table[model.cell] = [cell_label(atom.w) for atom in dgp.atoms]
    table["pmf"] = [atom.p for atom in dgp.atoms]
    return table


def sample_schema(dgp: DiscreteDgp) -> Dict[str, str]:
    schema = dict(dgp.model.schema())
    schema["u"] = "numeric"
    return schema


def population_dataset(dgp: DiscreteDgp) -> Dataset:
    schema = sample_schema(dgp)
    schema["pmf"] = "numeric"
    return dataset_from_frame(atom_table(dgp), schema)


def population_frame(dgp: DiscreteDgp):
    """The population as a model frame whose row weights are the atom probabilities"""
    config = dgp.model.copy(update={"weights": "pmf"})
    return build_frame(population_dataset(dgp), config, mode=dgp.mode)


class PopulationMoments:
    """Exact pmf-weighted moments over the atoms of a discrete population"""

    def __init__(self, dgp: DiscreteDgp):
        self.dgp = dgp
        table = atom_table(dgp)
        model = dgp.model
        self.p = table["pmf"].to_numpy(dtype=float)
        self.y = table[model.outcome].to_numpy(dtype=float)
        self.x = table[model.treatment].to_numpy(dtype=float)
        self.z = table[dgp.instrument].to_numpy(dtype=float)
        self.u = table["u"].to_numpy(dtype=float)
        self.levels = np.asarray(dgp.levels, dtype=float)
        self.widths = np.diff(self.levels)
        self.level_index = np.searchsorted(self.levels, self.x)

        keys = [tuple(atom.w) for atom in dgp.atoms]
        self.cells = sorted(set(keys))
        index = {key: c for c, key in enumerate(self.cells)}
        self.cell = np.array([index[key] for key in keys], dtype=np.int64)
        self.mass = np.bincount(self.cell, weights=self.p, minlength=self.n_cells)

        self.frame = population_frame(dgp)
        self.w = self.frame.w
        self._projector = WeightedProjector(self.w, self.p, self.frame.w_names)
        # δ_j · 1{X ≥ x_j}, one column per level above the lowest
        self.steps = (self.x[:, None] >= self.levels[None, 1:]).astype(float) * self.widths[None, :]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def labels(self) -> List[str]:
        return [cell_label(key) for key in self.cells]

    def expect(self, values: np.ndarray) -> float:
        return float(np.sum(self.p * values)) / float(np.sum(self.p))

    def cell_mean(self, values: np.ndarray) -> np.ndarray:
        total = np.bincount(self.cell, weights=self.p * values, minlength=self.n_cells)
        return total / np.where(self.mass > 0, self.mass, 1.0)

    def broadcast(self, per_cell: np.ndarray) -> np.ndarray:
        return np.asarray(per_cell)[self.cell]

    def cell_cov(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a_c = a - self.broadcast(self.cell_mean(a))
        b_c = b - self.broadcast(self.cell_mean(b))
        return self.cell_mean(a_c * b_c)

    def project(self, values: np.ndarray) -> np.ndarray:
        return self._projector.project(values).fitted

    def residual(self, values: np.ndarray) -> np.ndarray:
        return self._projector.residuals(values)

    def conditional_gap(self, values: np.ndarray) -> np.ndarray:
        """E(V | W) − L(V | W) per atom"""
        return self.broadcast(self.cell_mean(values)) - self.project(values)

    def by_level(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """E(V | X = x_i, cell) as a cells × levels table, and the populated mask"""
        flat = self.cell * len(self.levels) + self.level_index
        size = self.n_cells * len(self.levels)
        mass = np.bincount(flat, weights=self.p, minlength=size).reshape(self.n_cells, -1)
        total = np.bincount(flat, weights=self.p * values, minlength=size).reshape(self.n_cells, -1)
        populated = mass > 0
        return np.where(populated, total / np.where(populated, mass, 1.0), np.nan), populated


def enumerate_moments(dgp: DiscreteDgp) -> PopulationMoments:
    return PopulationMoments(dgp)


def _ratio(num: np.ndarray, den: np.ndarray, ok: np.ndarray) -> np.ndarray:
    return np.where(ok, num / np.where(ok, den, 1.0), np.nan)


def _clean(value):
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (float, np.floating)):
        return None if not np.isfinite(value) else float(value)
    return value


@dataclass
class OracleWeights:
    """Closed-form per-cell slopes and weights; undefined entries are NaN"""
    levels: List[float]
    cells: List[str]
    mass: np.ndarray
    b_iv: np.ndarray
    b_ols: np.ndarray
    lambda_iv: np.ndarray
    lambda_ols: np.ndarray
    omega_iv: np.ndarray
    omega_ols: np.ndarray
    level_iv: np.ndarray
    level_ols: np.ndarray
    lambda_did: Optional[np.ndarray] = None
    omega_did: Optional[np.ndarray] = None

    @property
    def group_iv(self) -> np.ndarray:
        omega = self.omega_did if self.omega_did is not None else self.omega_iv
        return self.mass * np.nan_to_num(omega)

    @property
    def group_ols(self) -> np.ndarray:
        return self.mass * np.nan_to_num(self.omega_ols)

    def to_dict(self) -> dict:
        return _clean({
            "levels": self.levels,
            "cells": self.cells,
            "mass": self.mass,
            "b_iv": self.b_iv,
            "b_ols": self.b_ols,
            "lambda_iv": self.lambda_iv,
            "lambda_ols": self.lambda_ols,
            "omega_iv": self.omega_iv,
            "omega_ols": self.omega_ols,
            "lambda_did": self.lambda_did,
            "omega_did": self.omega_did,
            "level_weights": {"levels": self.levels[1:], "ols": self.level_ols, "iv": self.level_iv},
            "group_weights": {"ols": self.group_ols, "iv": self.group_iv},
        })


def oracle_weights(dgp: DiscreteDgp, moments: Optional[PopulationMoments] = None) -> OracleWeights:
    pm = moments or enumerate_moments(dgp)
    F = pm.mass
    J = len(pm.widths)
    cov_xz = pm.cell_cov(pm.x, pm.z)
    var_x = pm.cell_cov(pm.x, pm.x)
    cov_sz = np.column_stack([pm.cell_cov(pm.steps[:, j], pm.z) for j in range(J)])
    cov_sx = np.column_stack([pm.cell_cov(pm.steps[:, j], pm.x) for j in range(J)])
    relevant = np.abs(cov_xz) > ZERO_TOL
    varying = var_x > ZERO_TOL

    e_xz = float(F @ cov_xz)
    e_xx = float(F @ var_x)
    omega_iv = cov_xz / e_xz if abs(e_xz) > ZERO_TOL else np.full(pm.n_cells, np.nan)
    omega_ols = var_x / e_xx if e_xx > ZERO_TOL else np.full(pm.n_cells, np.nan)
    level_iv = (F @ cov_sz) / e_xz if abs(e_xz) > ZERO_TOL else np.full(J, np.nan)
    level_ols = (F @ cov_sx) / e_xx if e_xx > ZERO_TOL else np.full(J, np.nan)

    lambda_did = omega_did = None
    if dgp.mode == "did-rd":
        z_t = pm.residual(pm.z)
        exz = pm.expect(pm.x * z_t)
        lxz = pm.cell_mean(pm.project(pm.x * z_t))
        ls = np.column_stack([pm.cell_mean(pm.project(pm.steps[:, j] * z_t)) for j in range(J)])
        omega_did = lxz / exz
        lambda_did = _ratio(ls, lxz[:, None], (np.abs(lxz) > ZERO_TOL)[:, None])
        level_iv = (F @ ls) / exz

    return OracleWeights(
        levels=[float(v) for v in pm.levels],
        cells=pm.labels,
        mass=F,
        b_iv=_ratio(pm.cell_cov(pm.y, pm.z), cov_xz, relevant),
        b_ols=_ratio(pm.cell_cov(pm.y, pm.x), var_x, varying),
        lambda_iv=_ratio(cov_sz, cov_xz[:, None], relevant[:, None]),
        lambda_ols=_ratio(cov_sx, var_x[:, None], varying[:, None]),
        omega_iv=omega_iv,
        omega_ols=omega_ols,
        level_iv=level_iv,
        level_ols=level_ols,
        lambda_did=lambda_did,
        omega_did=omega_did,
    )


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    residual: float
    tolerance: float
    applicable: bool
    passed: bool
    note: str = ""

    def to_dict(self) -> dict:
        return _clean({
            "name": self.name,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "applicable": self.applicable,
            "passed": self.passed,
            "note": self.note,
        })


def _check(name: str, lhs, rhs, applicable: bool, note: str = "", tol: float = IDENTITY_TOL) -> IdentityCheck:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    if lhs.size == 0:
        return IdentityCheck(name, 0.0, tol, False, True, note or "nothing to compare")
    diff = np.abs(lhs - rhs)
    residual = float(np.max(diff)) if np.all(np.isfinite(diff)) else float("inf")
    finite = np.concatenate([lhs[np.isfinite(lhs)], rhs[np.isfinite(rhs)]])
    scale = max(1.0, float(np.max(np.abs(finite)))) if finite.size else 1.0
    tolerance = tol * scale
    return IdentityCheck(name, residual, tolerance, bool(applicable), residual <= tolerance, note)


@dataclass
class OracleReport:
    name: str
    mode: str
    checks: List[IdentityCheck]
    values: Dict[str, float]
    weights: OracleWeights

    @property
    def all_passed(self) -> bool:
        return all(check.passed for check in self.checks if check.applicable)

    @property
    def failures(self) -> List[IdentityCheck]:
        return [check for check in self.checks if check.applicable and not check.passed]

    def check(self, name: str) -> IdentityCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "population": self.name,
            "mode": self.mode,
            "all_passed": self.all_passed,
            "checks": [check.to_dict() for check in self.checks],
            "values": _clean(self.values),
            "weights": self.weights.to_dict(),
        }


class _Oracle:
    """Population quantities shared by the identity and estimator checks"""

    def __init__(self, dgp: DiscreteDgp):
        self.dgp = dgp
        self.pm = pm = enumerate_moments(dgp)
        self.ow = oracle_weights(dgp, pm)
        self.standard = dgp.mode == "standard"
        self.did = dgp.mode == "did-rd"

        self.cov_xz = pm.cell_cov(pm.x, pm.z)
        self.relevant = np.abs(self.cov_xz) > ZERO_TOL
        self.varying = pm.cell_cov(pm.x, pm.x) > ZERO_TOL
        self.z_linearity_gap = float(np.max(np.abs(pm.conditional_gap(pm.z)[pm.p > 0])))
        self.x_linearity_gap = float(np.max(np.abs(pm.conditional_gap(pm.x)[pm.p > 0])))
        self.z_linear = self.z_linearity_gap <= IDENTITY_TOL * max(1.0, float(np.max(np.abs(pm.z))))
        self.x_linear = self.x_linearity_gap <= IDENTITY_TOL * max(1.0, float(np.max(np.abs(pm.x))))
        indicators = (pm.cell[:, None] == np.arange(pm.n_cells)[None, :]).astype(float)
        self.saturated = bool(np.max(np.abs(pm.residual(indicators))) <= ESTIMATOR_TOL)

        self.g = self._structural_means()
        self.m = np.diff(self.g, axis=1) / pm.widths
        self.ey, self.populated = pm.by_level(pm.y)
        self.g_ols = np.vstack([
            np.interp(pm.levels, pm.levels[row], self.ey[c, row]) for c, row in enumerate(self.populated)
        ])
        self.m_ols = np.diff(self.g_ols, axis=1) / pm.widths

        self.x_t = pm.residual(pm.x)
        self.z_t = pm.residual(pm.z)
        self.y_t = pm.residual(pm.y)

    def _structural_means(self) -> np.ndarray:
        """g(x_i, c), averaged over p(u | c) when the outcome is nonseparable"""
        pm, dgp = self.pm, self.dgp
        if dgp.separable:
            return np.vstack([dgp.structural_value(key) for key in pm.cells]).astype(float)
        g = np.zeros((pm.n_cells, len(pm.levels)))
        for (c, u), mass in self._cell_u_mass().items():
            g[c] += mass / pm.mass[c] * np.asarray(dgp.structural_value(pm.cells[c], u), dtype=float)
        return g

    def _cell_u_mass(self) -> Dict[Tuple[int, float], float]:
        pm = self.pm
        out: Dict[Tuple[int, float], float] = {}
        for c, u, p in zip(pm.cell, pm.u, pm.p):
            out[(int(c), float(u))] = out.get((int(c), float(u)), 0.0) + float(p)
        return out

    @property
    def beta_ols(self) -> float:
        return self.pm.expect(self.y_t * self.x_t) / self.pm.expect(self.x_t * self.x_t)

    @property
    def beta_iv(self) -> float:
        pm = self.pm
        if self.did:
            return pm.expect(pm.y * self.z_t) / pm.expect(pm.x * self.z_t)
        return pm.expect(self.y_t * self.z_t) / pm.expect(self.x_t * self.z_t)

    def iv_omega(self) -> np.ndarray:
        return self.ow.omega_did if self.did else self.ow.omega_iv

    def iv_lambda(self) -> np.ndarray:
        return self.ow.lambda_did if self.did else self.ow.lambda_iv

    def weighted(self, per_cell_level: np.ndarray, lam: np.ndarray, omega: np.ndarray) -> float:
        """Σ_c F(c) ω(c) Σ_j m(c, j) λ(c, j) over cells where the weights are defined"""
        inner = np.nansum(per_cell_level * lam, axis=1)
        return float(np.nansum(self.pm.mass * omega * inner))

    def linear_in_w(self, table: np.ndarray) -> bool:
        """Every column of a cells × k table is a linear function of W"""
        pm = self.pm
        per_atom = table[pm.cell]
        resid = pm.residual(per_atom)
        scale = max(1.0, float(np.nanmax(np.abs(table)))) if np.isfinite(table).any() else 1.0
        return bool(np.all(np.isfinite(per_atom)) and np.max(np.abs(resid[pm.p > 0])) <= ESTIMATOR_TOL * scale)


def _identity_checks(o: _Oracle) -> Tuple[List[IdentityCheck], Dict[str, float]]:
    dgp, pm, ow = o.dgp, o.pm, o.ow
    F = pm.mass
    sep, exo = dgp.separable, dgp.instrument_exogenous
    std_note = "" if o.standard else "standard mode only"
    checks: List[IdentityCheck] = []
    values: Dict[str, float] = {
        "beta_ols": o.beta_ols,
        "beta_iv": o.beta_iv,
        "z_linearity_gap": o.z_linearity_gap,
        "x_linearity_gap": o.x_linearity_gap,
        "saturated_covariates": float(o.saturated),
    }

    rel, var = o.relevant, o.varying
    me_iv = np.nansum(o.m * ow.lambda_iv, axis=1)
    checks.append(_check("iv_covariate_effect", ow.b_iv[rel], me_iv[rel], o.standard and sep and exo, std_note))
    checks.append(_check("iv_level_weights_sum", np.nansum(ow.lambda_iv[rel], axis=1), np.ones(rel.sum()), o.standard, std_note))
    me_ols = np.nansum(o.m_ols * ow.lambda_ols, axis=1)
    checks.append(_check("ols_covariate_effect", ow.b_ols[var], me_ols[var], True))
    checks.append(_check("ols_level_weights_sum", np.nansum(ow.lambda_ols[var], axis=1), np.ones(var.sum()), True))

    if o.standard:
        beta_star = float(np.nansum(F * ow.omega_iv * ow.b_iv))
        values["beta_star_iv"] = beta_star
        checks.append(_check("iv_covariate_average", o.beta_iv, beta_star, o.z_linear, "" if o.z_linear else "E(Z|W) is not linear"))
        v = pm.y - beta_star * pm.x
        approx = pm.expect(pm.conditional_gap(v) * pm.conditional_gap(pm.z)) / pm.expect(o.x_t * o.z_t)
        values["iv_approximation_error"] = approx
        checks.append(_check("iv_covariate_approximation", o.beta_iv - beta_star, approx, True))
        checks.append(_check("iv_covariate_weights_sum", float(np.nansum(F * ow.omega_iv)), 1.0, True))

    beta_star_ols = float(np.nansum(F * ow.omega_ols * ow.b_ols))
    values["beta_star_ols"] = beta_star_ols
    v = pm.y - beta_star_ols * pm.x
    approx_ols = pm.expect(pm.conditional_gap(v) * pm.conditional_gap(pm.x)) / pm.expect(o.x_t * o.x_t)
    checks.append(_check("ols_covariate_average", o.beta_ols, beta_star_ols, o.x_linear, "" if o.x_linear else "E(X|W) is not linear"))
    checks.append(_check("ols_covariate_approximation", o.beta_ols - beta_star_ols, approx_ols, True))
    checks.append(_check("ols_covariate_weights_sum", float(np.nansum(F * ow.omega_ols)), 1.0, True))

    if o.standard:
        note = "" if exo else "instrument is invalid"
        checks.append(_check("iv_double_average", o.beta_iv, o.weighted(o.m, ow.lambda_iv, ow.omega_iv), sep and exo and o.z_linear, note))
    checks.append(_check("ols_double_average", o.beta_ols, o.weighted(o.m_ols, ow.lambda_ols, ow.omega_ols), o.x_linear))

    structural_iv = None
    if o.standard and not sep:
        structural_iv, companion = _nonseparable_terms(o)
        applicable = exo and o.z_linear
        checks.append(_check("iv_nonseparable_average", o.beta_iv, structural_iv, applicable))
        checks.append(_check("iv_nonseparable_level_weights", companion[rel], ow.lambda_iv[rel], exo))
    if o.standard and sep:
        cov_uz = pm.cell_cov(pm.u, pm.z)
        bias = float(np.nansum(F * ow.omega_iv * _ratio(cov_uz, o.cov_xz, rel)))
        structural_iv = o.weighted(o.m, ow.lambda_iv, ow.omega_iv) + bias
        values["invalidity_bias"] = bias
        values["marginal_effect_structural"] = o.weighted(o.m - o.m_ols, ow.lambda_iv, ow.omega_iv)
        checks.append(_check("iv_invalidity_split", o.beta_iv, structural_iv, o.z_linear))
    if structural_iv is not None:
        values["beta_iv_structural"] = structural_iv

    if o.did:
        g_linear = o.linear_in_w(o.g)
        lxz_defined = np.isfinite(ow.lambda_did).all(axis=1)
        checks.append(_check(
            "did_weighted_average", o.beta_iv, o.weighted(o.m, ow.lambda_did, ow.omega_did), sep and g_linear,
            "" if g_linear else "g(x, W) is not linear in W",
        ))
        checks.append(_check(
            "did_level_weights_sum", np.nansum(ow.lambda_did[lxz_defined], axis=1), np.ones(lxz_defined.sum()), True,
        ))
        checks.append(_check("did_covariate_weights_sum", float(np.sum(F * ow.omega_did)), 1.0, True))

    if sep:
        eu, _ = pm.by_level(pm.u)
        lhs, rhs = [], []
        for c, row in enumerate(o.populated):
            idx = np.flatnonzero(row)
            for a, b in zip(idx, idx[1:]):
                lhs.append(o.ey[c, b] - o.ey[c, a])
                rhs.append(o.g[c, b] - o.g[c, a] + eu[c, b] - eu[c, a])
        checks.append(_check("ols_marginal_split", lhs, rhs, True))
    return checks, values


def _nonseparable_terms(o: _Oracle) -> Tuple[float, np.ndarray]:
    """Σ_c F ω Σ_u p(u|c) Σ_j Δg(x_j, c, u)/δ_j · λ^U_j(c, u), and Σ_u p(u|c) λ^U_j(c, u)"""
    pm, ow, dgp = o.pm, o.ow, o.dgp
    pairs = sorted(o._cell_u_mass().items())
    code = {key: k for k, (key, _) in enumerate(pairs)}
    group = np.array([code[(int(c), float(u))] for c, u in zip(pm.cell, pm.u)])
    mass = np.bincount(group, weights=pm.p, minlength=len(pairs))

    def group_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        safe = np.where(mass > 0, mass, 1.0)
        a_c = a - (np.bincount(group, weights=pm.p * a, minlength=len(pairs)) / safe)[group]
        b_c = b - (np.bincount(group, weights=pm.p * b, minlength=len(pairs)) / safe)[group]
        return np.bincount(group, weights=pm.p * a_c * b_c, minlength=len(pairs)) / safe

    total = 0.0
    companion = np.zeros((pm.n_cells, len(pm.widths)))
    cov_s = np.column_stack([group_cov(pm.steps[:, j], pm.z) for j in range(len(pm.widths))])
    for k, ((c, u), m_cu) in enumerate(pairs):
        if not o.relevant[c]:
            continue
        lam_u = cov_s[k] / o.cov_xz[c]
        g_u = np.asarray(dgp.structural_value(pm.cells[c], u), dtype=float)
        slope_u = np.diff(g_u) / pm.widths
        share = m_cu / pm.mass[c]
        companion[c] += share * lam_u
        total += m_cu * ow.omega_iv[c] * float(slope_u @ lam_u)
    return total, companion


def _saturated_basis(frame):
    levels = support_levels(frame.x, frame.weights)
    return make_basis(frame.w_names, [], levels[2:], {"linear": "full", "step": "full"})


def population_estimates(dgp: DiscreteDgp, regime: str = "plugin", saturated: bool = False) -> DecompositionResult:
    """The sample estimators applied to the population, with the atom probabilities as row weights"""
    frame = population_frame(dgp)
    if saturated:
        return decompose(frame, slope_design="full", basis=_saturated_basis(frame), regime=regime)
    return decompose(frame, regime=regime)


def _estimator_checks(o: _Oracle, values: Dict[str, float]) -> List[IdentityCheck]:
    dgp, pm, ow = o.dgp, o.pm, o.ow
    F = pm.mass
    names = ["est_beta_ols", "est_beta_c", "est_beta_cl", "est_beta_iv", "est_level_iv", "est_level_ols",
             "est_group_iv", "est_group_ols"]
    try:
        result = population_estimates(dgp, saturated=True)
        rframe = result.fits.rframe
        profile = treatment_level_weights(rframe)
        groups = group_weights(rframe, [pm.labels[c] for c in pm.cell], pm.labels)
    except IvGapError as e:
        logger.warning(f"Population estimators failed on '{dgp.name}': {e.message}")
        return [IdentityCheck(name, float("nan"), ESTIMATOR_TOL, False, False, e.message) for name in names]

    est = {name: c.value for name, c in result.coefficients.items()}
    omega = o.iv_omega()
    lam = o.iv_lambda()
    beta_c = float(np.nansum(F * omega * ow.b_ols))
    beta_cl = o.weighted(o.m_ols, lam, omega)
    values.update({"beta_c": beta_c, "beta_cl": beta_cl})
    values.update({f"estimated_{name}": value for name, value in est.items()})

    def check(name, lhs, rhs, applicable, note=""):
        return _check(name, lhs, rhs, applicable, note, tol=ESTIMATOR_TOL)

    checks = [check("est_beta_ols", est["beta_ols"], o.weighted(o.m_ols, ow.lambda_ols, ow.omega_ols), o.x_linear)]
    sat_note = "" if o.saturated else "covariates are not saturated in the cells"
    if o.standard:
        checks.append(check("est_beta_c", est["beta_c"], beta_c, o.saturated, sat_note))
        checks.append(check("est_beta_cl", est["beta_cl"], beta_cl, o.saturated, sat_note))
        checks.append(check("est_beta_iv", est["beta_iv"], float(np.nansum(F * ow.omega_iv * ow.b_iv)), o.z_linear))
        structural = values.get("beta_iv_structural")
        structural_ok = structural is not None and (dgp.separable or dgp.instrument_exogenous)
        checks.append(check("decomp_covariate_weight", est["beta_c"] - est["beta_ols"],
                            float(np.nansum(F * ow.b_ols * (ow.omega_iv - ow.omega_ols))), o.saturated, sat_note))
        checks.append(check("decomp_treatment_level_weight", est["beta_cl"] - est["beta_c"],
                            o.weighted(o.m_ols, ow.lambda_iv - ow.lambda_ols, ow.omega_iv), o.saturated, sat_note))
        checks.append(check("decomp_marginal_effect", est["beta_iv"] - est["beta_cl"],
                            (structural if structural is not None else np.nan) - beta_cl,
                            o.saturated and structural_ok, sat_note))
        values["covariate_weight"] = beta_c - o.beta_ols
        values["treatment_level_weight"] = beta_cl - beta_c
        values["marginal_effect"] = o.beta_iv - beta_cl
    else:
        intercept = pm.cell_mean(pm.y) - ow.b_ols * pm.cell_mean(pm.x)
        b_linear = o.linear_in_w(np.column_stack([ow.b_ols, intercept]))
        full_support = bool(o.populated.all())
        g_linear = full_support and o.linear_in_w(o.g_ols)
        checks.append(check("est_beta_c", est["beta_c"], beta_c, b_linear and full_support,
                            "" if b_linear else "b_OLS(W) is not linear in W"))
        checks.append(check("est_beta_cl", est["beta_cl"], beta_cl, g_linear,
                            "" if g_linear else "g_OLS(x, W) is not linear in W on full support"))
        checks.append(check("est_beta_iv", est["beta_iv"], o.beta_iv, True))
        values["covariate_weight"] = beta_c - o.beta_ols
        values["treatment_level_weight"] = beta_cl - beta_c
        values["marginal_effect"] = o.beta_iv - beta_cl

    merged = profile.merged
    if not merged and len(profile.rows) == len(ow.level_iv):
        level_iv_ok = o.did or o.z_linear
        checks.append(check("est_level_iv", profile.iv_weights, ow.level_iv, level_iv_ok))
        checks.append(check("est_level_ols", profile.ols_weights, ow.level_ols, o.x_linear))
    else:
        checks.append(IdentityCheck("est_level_iv", float("nan"), ESTIMATOR_TOL, False, False, "levels were merged"))
        checks.append(IdentityCheck("est_level_ols", float("nan"), ESTIMATOR_TOL, False, False, "levels were merged"))
    checks.append(check("est_group_iv", [row.iv_weight for row in groups], ow.group_iv, o.did or o.saturated))
    checks.append(check("est_group_ols", [row.ols_weight for row in groups], ow.group_ols, o.x_linear))
    return checks


def verify_identities(dgp: DiscreteDgp) -> OracleReport:
    """Every applicable identity and estimator-vs-oracle equality on an exact population"""
    oracle = _Oracle(dgp)
    checks, values = _identity_checks(oracle)
    checks += _estimator_checks(oracle, values)
    report = OracleReport(dgp.name, dgp.mode, checks, values, oracle.ow)
    for failure in report.failures:
        logger.warning(f"Oracle check {failure.name} failed on '{dgp.name}': residual {failure.residual:.3e}")
    passed = sum(1 for check in checks if check.applicable and check.passed)
    applicable = sum(1 for check in checks if check.applicable)
    logger.info(f"Oracle checks on '{dgp.name}': {passed}/{applicable} applicable checks passed")
    return report


def sample(
    dgp: DiscreteDgp,
    n: int,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    table: Optional[pd.DataFrame] = None,
) -> Dataset:
    """n iid draws of atoms; the result carries u alongside the observed columns"""
    if n < 1:
        raise ConfigError("sample size must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    table = table if table is not None else atom_table(dgp)
    pmf = table["pmf"].to_numpy(dtype=float)
    index = rng.choice(len(table), size=n, p=pmf / pmf.sum())
    raw = table.iloc[index].drop(columns=["pmf"]).reset_index(drop=True)
    return dataset_from_frame(raw, sample_schema(dgp))


@dataclass
class McSummary:
    name: str
    n: int
    reps: int
    seed: int
    regime: str
    threads: int
    table: pd.DataFrame
    failures: int = 0
    rng: str = RNG_NAME

    def row(self, target: str) -> pd.Series:
        return self.table.set_index("target").loc[target]

    def to_dict(self) -> dict:
        return {
            "population": self.name,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "se_regime": self.regime,
            "threads": self.threads,
            "failures": self.failures,
            "rng": self.rng,
            "summary": _clean(self.table.to_dict(orient="records")),
        }


def _replicate(
    dgp: DiscreteDgp,
    table: pd.DataFrame,
    n: int,
    seed: np.random.SeedSequence,
    regime: str,
    targets: Sequence[str],
) -> Optional[Dict[str, Tuple[float, float, float]]]:
    rng = np.random.default_rng(seed)
    try:
        frame = build_frame(sample(dgp, n, rng=rng, table=table), dgp.model, mode=dgp.mode)
        result = decompose(frame, regime=regime)
        out = {name: (est.value, est.se, np.nan) for name, est in result.coefficients.items() if name in targets}
        if "dwh" in targets:
            test = dwh_test(result.fits.rframe, result.fits.cm, regime)
            out["dwh"] = (test.diff, test.se_diff, test.p_value)
        return out
    except (IvGapError, np.linalg.LinAlgError) as e:
        logger.warning(f"Replication {seed.spawn_key} failed: {str(e)}")
        return None


def _rejection_rate(pval: np.ndarray, level: float = 0.05) -> float:
    """Share of replications rejecting at level, among those with a defined p-value"""
    finite = pval[np.isfinite(pval)]
    return float(np.mean(finite < level)) if len(finite) else float("nan")


def mc_study(
    dgp: DiscreteDgp,
    n: int,
    reps: int,
    seed: int,
    targets: Sequence[str] = MC_TARGETS,
    threads: int = 1,
    regime: str = "plugin",
) -> McSummary:
    """Replicate the estimators on iid samples and summarize them against the population values"""
    unknown = [t for t in targets if t not in MC_TARGETS]
    if unknown:
        raise ConfigError(f"unknown Monte Carlo targets: {unknown}")
    truth_result = population_estimates(dgp, regime)
    truth = {name: est.value for name, est in truth_result.coefficients.items()}
    truth["dwh"] = truth["beta_iv"] - truth["beta_cl"]

    table = atom_table(dgp)
    children = np.random.SeedSequence(seed).spawn(reps)
    logger.info(f"Monte Carlo on '{dgp.name}': {reps} replications of n={n} with {threads} threads")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda child: _replicate(dgp, table, n, child, regime, targets), children))
    done = [r for r in results if r is not None]
    failures = len(results) - len(done)
    if failures:
        logger.warning(f"{failures} of {reps} replications failed")

    z = float(stats.norm.ppf(0.975))
    rows = []
    for target in targets:
        est = np.array([r[target][0] for r in done])
        se = np.array([r[target][1] for r in done])
        pval = np.array([r[target][2] for r in done])
        k = len(est)
        sd = float(np.std(est, ddof=1)) if k > 1 else float("nan")
        rows.append({
            "target": target,
            "truth": truth[target],
            "mean": float(np.mean(est)) if k else float("nan"),
            "bias": float(np.mean(est) - truth[target]) if k else float("nan"),
            "sd": sd,
            "mc_se": sd / np.sqrt(k) if k > 1 else float("nan"),
            "rmse": float(np.sqrt(np.mean((est - truth[target]) ** 2))) if k else float("nan"),
            "mean_se": float(np.mean(se)) if k else float("nan"),
            "coverage": float(np.mean(np.abs(est - truth[target]) <= z * se)) if k else float("nan"),
            "rejection_rate": _rejection_rate(pval) if target == "dwh" and k else float("nan"),
            "reps_ok": k,
        })
    summary = McSummary(dgp.name, n, reps, seed, regime, threads, pd.DataFrame(rows), failures)
    for row in rows:
        logger.info(
            f"{row['target']}: truth={row['truth']:.6g} mean={row['mean']:.6g} "
            f"rmse={row['rmse']:.4g} coverage={row['coverage']:.3f}"
        )
    return summary


def _standard_model() -> dict:
    return {
        "outcome": "y",
        "treatment": "x",
        "instruments": ["z"],
        "covariates": [{"kind": "categorical", "column": "d"}],
        "cell": "d",
        "groups": "d",
        "mode": "standard",
        "basis": {"hinge_knots": [], "heterogeneity": {"step": "full"}},
    }


def _random_standard(regime: str, rng: np.random.Generator) -> DiscreteDgp:
    cells = int(rng.integers(2, 4))
    levels = [0.0, 1.0, 2.0, 3.0]
    top = len(levels) - 1
    cell_p = rng.dirichlet(np.full(cells, 2.0))
    separable = regime != "nonseparable"
    exogenous = regime != "separable-invalid"

    atoms, structural = [], []
    for d in range(cells):
        pz = float(rng.uniform(0.25, 0.75))
        base, shift, cut = int(rng.integers(0, 2)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pv0 = rng.dirichlet(np.full(3, 2.0))
        pv = {0: pv0, 1: rng.dirichlet(np.full(3, 2.0)) if not exogenous else pv0}
        mean_v = float(((1 - pz) * pv[0] + pz * pv[1]) @ np.arange(3))
        scale = float(rng.uniform(0.5, 1.5))
        for z in (0, 1):
            for v in range(3):
                atoms.append({
                    "w": [float(d)],
                    "u": scale * (v - mean_v) if separable else float(v),
                    "z": float(z),
                    "x": float(min(top, base + shift * z + int(v >= cut))),
                    "p": float(cell_p[d] * (pz if z else 1 - pz) * pv[z][v]),
                })
        start = float(rng.normal())
        if separable:
            steps = rng.uniform(0.2, 2.0, size=top)
            structural.append({"w": [float(d)], "values": list(start + np.concatenate([[0.0], np.cumsum(steps)]))})
        else:
            for v in range(3):
                steps = rng.uniform(0.2, 2.0, size=top) * (1.0 + 0.5 * v)
                structural.append({
                    "w": [float(d)], "u": float(v),
                    "values": list(start + np.concatenate([[0.0], np.cumsum(steps)])),
                })

    total = sum(atom["p"] for atom in atoms)
    for atom in atoms:
        atom["p"] /= total
    return DiscreteDgp.parse_obj({
        "name": f"random-{regime}",
        "mode": "standard",
        "separable": separable,
        "instrument_exogenous": exogenous,
        "w_columns": ["d"],
        "levels": levels,
        "atoms": atoms,
        "structural": structural,
        "model": _standard_model(),
    })


def _random_did(rng: np.random.Generator) -> DiscreteDgp:
    levels = [0.0, 1.0, 2.0]
    cells = [(g, t) for g in (0, 1) for t in (0, 1, 2)]
    cell_p = rng.dirichlet(np.full(len(cells), 3.0))
    q = float(rng.uniform(0.1, 0.4))
    scale = float(rng.uniform(0.5, 1.5))
    shocks = [(-scale, q), (0.0, 1 - 2 * q), (scale, q)]
    coef = rng.normal(size=(len(levels), 4))

    atoms, structural = [], []
    for (g, t), pc in zip(cells, cell_p):
        z = float(g * (t >= 1))
        px = rng.dirichlet(np.array([2.0, 2.0, 2.0 + 4.0 * z]))
        design = np.array([1.0, g, float(t == 1), float(t == 2)])
        structural.append({"w": [float(g), float(t)], "values": [float(coef[i] @ design) for i in range(len(levels))]})
        for i, x in enumerate(levels):
            for u, pu in shocks:
                atoms.append({"w": [float(g), float(t)], "u": u, "z": z, "x": x, "p": float(pc * px[i] * pu)})

    total = sum(atom["p"] for atom in atoms)
    for atom in atoms:
        atom["p"] /= total
    return DiscreteDgp.parse_obj({
        "name": "random-did-rd",
        "mode": "did-rd",
        "separable": True,
        "instrument_exogenous": True,
        "w_columns": ["grp", "per"],
        "levels": levels,
        "atoms": atoms,
        "structural": structural,
        "model": {
            "outcome": "y",
            "treatment": "x",
            "instruments": ["z"],
            "covariates": ["grp", {"kind": "categorical", "column": "per"}],
            "cell": "cell",
            "groups": "grp",
            "mode": "did-rd",
            "basis": {"hinge_knots": [], "heterogeneity": {"step": "full"}},
        },
    })


def random_dgp(regime: str, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> DiscreteDgp:
    """A random discrete population of the given regime"""
    if regime not in REGIMES:
        raise ConfigError(f"unknown population regime '{regime}'; expected one of {REGIMES}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    if regime == "did-rd":
        return _random_did(rng)
    return _random_standard(regime, rng)
