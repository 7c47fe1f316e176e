from pydantic import BaseSettings, BaseModel, Field, ValidationError, validator, root_validator
import json
import os
from pathlib import Path
from typing import Dict, Any, List, Optional, Union
import logging

from services.errors import ConfigError

logger = logging.getLogger(__name__)

TERM_KINDS = {
    "intercept": "intercept",
    "numeric": "numeric",
    "categorical": "categorical",
    "categorical-dummies": "categorical",
    "interaction": "interaction",
    "piecewise_linear": "piecewise_linear",
    "piecewise-linear": "piecewise_linear",
    "polynomial": "polynomial",
    "step": "step",
    "step-indicators": "step",
}
MODES = ("standard", "did-rd", "auto")
SE_REGIMES = ("plugin", "corrected")
FORMATS = ("json", "csv", "both")
VERSION = "1.0.0"
COMMANDS = ("decompose", "weights", "dwh-test", "first-stage", "simulate", "oracle-check", "mc-study")


class Settings(BaseSettings):
    LOG_LEVEL: str = Field(default="INFO", env='IVGAP_LOG_LEVEL')
    THREADS: int = Field(default=1, env='IVGAP_THREADS')
    SE_REGIME: str = Field(default="plugin", env='IVGAP_SE_REGIME')
    FORMAT: str = Field(default="both", env='IVGAP_FORMAT')
    SEED: int = Field(default=20240101, env='IVGAP_SEED')

    class Config:
        env_file = ".env"
        case_sensitive = True

    @validator("SE_REGIME")
    def _check_regime(cls, value):
        if value not in SE_REGIMES:
            raise ValueError(f"SE regime must be one of {SE_REGIMES}")
        return value

    @validator("FORMAT")
    def _check_format(cls, value):
        if value not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        return value

    @validator("THREADS")
    def _check_threads(cls, value):
        if value < 1:
            raise ValueError("thread count must be at least 1")
        return value


class TermSpec(BaseModel):
    """One covariate (or instrument) term of the design"""
    kind: str
    columns: List[str] = []
    knots: List[float] = []
    degree: int = 1
    thresholds: List[float] = []

    @root_validator(pre=True)
    def _normalize(cls, values):
        if "column" in values and "columns" not in values:
            values["columns"] = [values.pop("column")]
        kind = values.get("kind")
        if kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind: {kind}")
        values["kind"] = TERM_KINDS[kind]
        return values

    @root_validator
    def _check_invariants(cls, values):
        kind = values.get("kind")
        columns = values.get("columns") or []
        if kind == "intercept":
            return values
        if kind == "interaction":
            if len(columns) < 2:
                raise ValueError("interaction needs at least two source columns")
        elif len(columns) != 1:
            raise ValueError(f"{kind} term needs exactly one source column")
        if kind == "piecewise_linear":
            knots = values.get("knots") or []
            if not knots:
                raise ValueError("piecewise_linear term needs at least one knot")
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ValueError("piecewise_linear knots must be strictly increasing")
        if kind == "polynomial" and values.get("degree", 1) < 1:
            raise ValueError("polynomial degree must be at least 1")
        if kind == "step" and not values.get("thresholds"):
            raise ValueError("step term needs at least one threshold")
        return values


def _as_term(value: Any) -> Any:
    if isinstance(value, str):
        return {"kind": "numeric", "columns": [value]}
    return value


class BasisConfig(BaseModel):
    """Basis over the treatment for the conditional-mean model"""
    hinge_knots: Optional[List[float]] = None
    steps: bool = True
    step_quantiles: Optional[int] = None
    heterogeneity: Dict[str, Union[str, List[str]]] = {
        "linear": "full",
        "hinge": "full",
        "step": "constant",
    }

    @validator("step_quantiles")
    def _check_quantiles(cls, value):
        if value is not None and value < 2:
            raise ValueError("step_quantiles must be at least 2")
        return value

    @validator("heterogeneity")
    def _check_heterogeneity(cls, value):
        merged = {"linear": "full", "hinge": "full", "step": "constant"}
        for key, design in value.items():
            if key not in merged:
                raise ValueError(f"unknown basis kind in heterogeneity: {key}")
            if isinstance(design, str) and design not in ("full", "constant"):
                raise ValueError(f"heterogeneity design must be 'full', 'constant' or a column list, got {design}")
            merged[key] = design
        return merged


class ModelConfig(BaseModel):
    outcome: str
    treatment: str
    instruments: List[TermSpec]
    covariates: List[TermSpec] = []
    weights: Optional[str] = None
    cluster: Optional[str] = None
    cell: Optional[str] = None
    groups: Optional[str] = None
    mode: str = "auto"
    slope_design: Union[str, List[str]] = "full"
    basis: BasisConfig = BasisConfig()

    @validator("instruments", "covariates", pre=True)
    def _coerce_terms(cls, value):
        return [_as_term(item) for item in value]

    @validator("instruments")
    def _check_instruments(cls, value):
        if not value:
            raise ValueError("at least one instrument is required")
        if any(term.kind == "intercept" for term in value):
            raise ValueError("the intercept cannot be an instrument")
        return value

    @validator("mode")
    def _check_mode(cls, value):
        if value not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return value

    @validator("slope_design")
    def _check_slope_design(cls, value):
        if isinstance(value, str) and value not in ("full", "constant"):
            raise ValueError("slope_design must be 'full', 'constant' or a column list")
        return value

    def schema(self) -> Dict[str, str]:
        """Column-role map: every referenced column and whether it is numeric or categorical"""
        roles: Dict[str, str] = {self.outcome: "numeric", self.treatment: "numeric"}

        def claim(column: str, role: str):
            previous = roles.get(column)
            if previous is not None and previous != role:
                raise ConfigError(f"column '{column}' used both as {previous} and {role}")
            roles[column] = role

        for term in self.instruments + self.covariates:
            if term.kind == "categorical":
                claim(term.columns[0], "categorical")
            elif term.kind != "interaction":
                for column in term.columns:
                    claim(column, "numeric")
        for term in self.instruments + self.covariates:
            if term.kind == "interaction":
                for column in term.columns:
                    roles.setdefault(column, "numeric")
        if self.weights:
            claim(self.weights, "numeric")
        for column in (self.cluster, self.cell, self.groups):
            if column:
                roles.setdefault(column, "categorical")
        return roles

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        try:
            with Path(path).open("r", encoding="utf-8") as f:
                payload = json.load(f)
            return cls.parse_obj(payload)
        except FileNotFoundError:
            logger.error(f"Model configuration not found: {path}")
            raise ConfigError(f"model configuration not found: {path}")
        except json.JSONDecodeError as e:
            logger.error(f"Failed to parse model configuration: {str(e)}")
            raise ConfigError(f"model configuration is not valid JSON: {str(e)}")
        except ValidationError as e:
            logger.error(f"Invalid model configuration: {str(e)}")
            raise ConfigError(f"invalid model configuration: {str(e)}")


class RunConfig(BaseModel):
    command: str
    data: Optional[Path] = None
    model: Optional[Path] = None
    dgp: Optional[Path] = None
    out: Path = Path("results")
    mode: Optional[str] = None
    se: str = "plugin"
    compare_se: bool = False
    cluster: Optional[str] = None
    weights: Optional[str] = None
    bin: float = 0.0
    threads: int = 1
    seed: int = 20240101
    format: str = "both"
    n: int = 10000
    reps: int = 200
    targets: List[str] = ["beta_ols", "beta_c", "beta_cl", "beta_iv", "dwh"]

    @validator("command")
    def _check_command(cls, value):
        if value not in COMMANDS:
            raise ValueError(f"unknown subcommand: {value}")
        return value

    @validator("mode")
    def _check_mode(cls, value):
        if value is not None and value not in ("standard", "did-rd"):
            raise ValueError("mode override must be 'standard' or 'did-rd'")
        return value

    @validator("se")
    def _check_se(cls, value):
        if value not in SE_REGIMES:
            raise ValueError(f"SE regime must be one of {SE_REGIMES}")
        return value

    @validator("format")
    def _check_format(cls, value):
        if value not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        return value

    @validator("bin")
    def _check_bin(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("bin floor must lie in [0, 1)")
        return value

    @validator("seed")
    def _check_seed(cls, value):
        if not 0 <= value < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return value

    @validator("threads", "n")
    def _check_positive(cls, value):
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @validator("reps")
    def _check_reps(cls, value):
        if value < 2:
            raise ValueError("reps must be at least 2")
        return value

    @validator("out")
    def _check_out(cls, value):
        try:
            value.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ValueError(f"cannot create output directory {value}: {str(e)}")
        if not os.access(value, os.W_OK):
            raise ValueError(f"output directory {value} is not writable")
        return value

    @root_validator
    def _check_inputs(cls, values):
        command = values.get("command")
        if command in ("decompose", "weights", "dwh-test", "first-stage"):
            if values.get("data") is None or values.get("model") is None:
                raise ValueError(f"{command} needs --data and --model")
        if command in ("simulate", "oracle-check", "mc-study") and values.get("dgp") is None:
            raise ValueError(f"{command} needs --dgp")
        return values
