from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config import ModelConfig
from services.data import build_frame, dataset_from_frame
from services.synthlab import DiscreteDgp

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def load_fixture(name: str) -> DiscreteDgp:
    return DiscreteDgp.load(FIXTURES / f"{name}.json")


def make_frame(table: pd.DataFrame, model: dict, **kwargs):
    """Model frame straight from an in-memory table"""
    config = ModelConfig.parse_obj(model)
    schema = config.schema()
    if kwargs.get("weights"):
        schema.setdefault(kwargs["weights"], "numeric")
    if kwargs.get("cluster"):
        schema.setdefault(kwargs["cluster"], "categorical")
    return build_frame(dataset_from_frame(table, schema), config, **kwargs)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def dgp_a():
    return load_fixture("dgp_a")


@pytest.fixture
def dgp_b():
    return load_fixture("dgp_b")


@pytest.fixture
def dgp_b_invalid():
    return load_fixture("dgp_b_invalid")


@pytest.fixture
def dgp_b_exogenous():
    return load_fixture("dgp_b_exogenous")


@pytest.fixture
def dgp_c():
    return load_fixture("dgp_c")


@pytest.fixture
def linear_table():
    """Continuous design with a valid instrument and an endogenous treatment"""
    rng = np.random.default_rng(7)
    n = 400
    w1 = rng.normal(size=n)
    z = rng.normal(size=n) + 0.5 * w1
    v = rng.normal(size=n)
    x = 1.0 + 0.8 * z + 0.3 * w1 + v
    y = 2.0 + 1.5 * x - 0.7 * w1 + 0.6 * v + rng.normal(size=n)
    return pd.DataFrame({
        "y": y, "x": x, "z": z, "w1": w1,
        "g": rng.integers(0, 4, size=n).astype(float),
        "cl": rng.integers(0, 40, size=n).astype(float),
        "wt": rng.uniform(0.5, 2.0, size=n),
    })


@pytest.fixture
def linear_model():
    return {"outcome": "y", "treatment": "x", "instruments": ["z"], "covariates": ["w1"], "mode": "standard"}


@pytest.fixture
def discrete_table():
    """Integer-valued treatment on three levels with a binary instrument and two covariate cells"""
    rng = np.random.default_rng(11)
    n = 3000
    d = rng.integers(0, 2, size=n)
    z = rng.integers(0, 2, size=n)
    v = rng.integers(0, 2, size=n)
    x = np.minimum(2, z + v + d * z)
    y = x + 0.5 * x ** 2 * (1 + d) + 0.4 * (v - 0.5) + d + rng.normal(scale=0.5, size=n)
    return pd.DataFrame({"y": y, "x": x.astype(float), "z": z.astype(float), "d": d.astype(float)})


@pytest.fixture
def discrete_model():
    return {
        "outcome": "y",
        "treatment": "x",
        "instruments": ["z"],
        "covariates": [{"kind": "categorical", "column": "d"}],
        "groups": "d",
        "mode": "standard",
    }
