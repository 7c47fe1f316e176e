import numpy as np
import pandas as pd
import pytest

from services.condmean import linear_basis
from services.errors import DegenerateTreatmentError, FrameError, RelevanceError
from services.estimators import (
    F_LABEL,
    check_relevance,
    first_stage_summary,
    iv_beta,
    make_synthetic_instrument,
    ols_beta,
    subsample_ols,
)
from services.projection import residualize_frame
from conftest import make_frame


def _ols(design, y):
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


@pytest.fixture
def frame(linear_table, linear_model):
    return make_frame(linear_table, linear_model)


@pytest.fixture
def rframe(frame):
    return residualize_frame(frame, linear_basis(frame.w_names))


def test_synthetic_instrument_is_first_stage_fit(frame, linear_table):
    t = linear_table
    design = np.column_stack([t["z"], np.ones(len(t)), t["w1"]])
    expected = design @ _ols(design, t["x"].to_numpy())
    np.testing.assert_allclose(make_synthetic_instrument(frame), expected, rtol=1e-9, atol=1e-9)


def test_ols_matches_full_regression(rframe, linear_table):
    t = linear_table
    design = np.column_stack([np.ones(len(t)), t["w1"], t["x"]])
    y = t["y"].to_numpy()
    coef = _ols(design, y)
    estimate = ols_beta(rframe)
    assert estimate.value == pytest.approx(coef[2], rel=1e-9)

    # Heteroskedasticity-robust SE with the n/(n-1) factor
    n = len(t)
    x_t = rframe.x_t
    resid = y - design @ coef
    expected_se = np.sqrt(n / (n - 1) * np.sum((x_t * resid) ** 2)) / np.sum(x_t ** 2)
    assert estimate.se == pytest.approx(expected_se, rel=1e-8)


def test_iv_matches_just_identified_iv(rframe, linear_table):
    t = linear_table
    regressors = np.column_stack([np.ones(len(t)), t["w1"], t["x"]])
    instruments = np.column_stack([np.ones(len(t)), t["w1"], t["z"]])
    expected = np.linalg.solve(instruments.T @ regressors, instruments.T @ t["y"].to_numpy())
    estimate = iv_beta(rframe)
    assert estimate.value == pytest.approx(expected[2], rel=1e-9)
    assert estimate.se > 0
    assert estimate.denominator == pytest.approx(rframe.iv_denominator())


def test_row_weights_enter_every_moment(linear_table, linear_model):
    weighted = make_frame(linear_table, linear_model, weights="wt")
    estimate = ols_beta(residualize_frame(weighted, linear_basis(weighted.w_names)))
    t = linear_table
    root = np.sqrt(t["wt"].to_numpy())
    design = np.column_stack([np.ones(len(t)), t["w1"], t["x"]])
    coef = _ols(root[:, None] * design, root * t["y"].to_numpy())
    assert estimate.value == pytest.approx(coef[2], rel=1e-9)


def test_irrelevant_instrument_raises():
    table = pd.DataFrame({
        "y": [0.3, 1.2, -0.4, 0.8, 2.1, 1.7, 0.1, -0.2],
        "x": [1.0, 1.0, -1.0, -1.0, 2.0, 2.0, 0.0, 0.0],
        "z": [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
    })
    frame = make_frame(table, {"outcome": "y", "treatment": "x", "instruments": ["z"], "mode": "standard"})
    rframe = residualize_frame(frame, linear_basis(frame.w_names))
    with pytest.raises(RelevanceError) as info:
        check_relevance(rframe)
    assert info.value.code == "relevance_error"
    record = info.value.to_dict()
    assert record["error"] == "relevance_error"
    assert record["first_stage_f"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(RelevanceError):
        iv_beta(rframe)


def test_treatment_spanned_by_covariates_raises(linear_table, linear_model):
    table = linear_table.copy()
    table["x"] = 1.0 + 2.0 * table["w1"]
    frame = make_frame(table, linear_model)
    rframe = residualize_frame(frame, linear_basis(frame.w_names), instrument=frame.x)
    with pytest.raises(DegenerateTreatmentError):
        ols_beta(rframe)


def test_first_stage_summary(linear_table, linear_model):
    frame = make_frame(linear_table, linear_model, cluster="cl")
    summary = first_stage_summary(frame)
    t = linear_table
    coef = _ols(np.column_stack([t["z"], np.ones(len(t)), t["w1"]]), t["x"].to_numpy())

    assert summary.label == F_LABEL
    assert summary.names == ["z", "(intercept)", "w1"]
    assert summary.df == 1
    assert summary.n_clusters == 40
    assert not summary.perfect_fit
    np.testing.assert_allclose(summary.coefficients, coef, rtol=1e-9)
    assert summary.f_stat == pytest.approx((summary.coefficients[0] / summary.ses[0]) ** 2, rel=1e-8)
    assert summary.f_stat > 10
    assert list(summary.table().columns) == ["term", "coefficient", "se"]


def test_first_stage_weighted_cluster_sandwich(linear_table, linear_model):
    # Setup
    t = linear_table
    frame = make_frame(t, linear_model, weights="wt", cluster="cl")
    design = np.column_stack([t["z"], np.ones(len(t)), t["w1"]])
    w = t["wt"].to_numpy()

    # Execute
    summary = first_stage_summary(frame)

    # Assert
    bread = np.linalg.inv(design.T @ (w[:, None] * design))
    coef = bread @ design.T @ (w * t["x"].to_numpy())
    resid = t["x"].to_numpy() - design @ coef
    scores = pd.DataFrame(design * (w * resid)[:, None]).groupby(t["cl"].to_numpy()).sum().to_numpy()
    vcov = 40 / 39 * bread @ (scores.T @ scores) @ bread
    np.testing.assert_allclose(summary.coefficients, coef, rtol=1e-9)
    np.testing.assert_allclose(summary.ses, np.sqrt(np.diag(vcov)), rtol=1e-8)
    assert summary.f_stat == pytest.approx(coef[0] ** 2 / vcov[0, 0], rel=1e-8)


def test_first_stage_perfect_fit(linear_table, linear_model):
    table = linear_table.copy()
    table["x"] = 2.0 * table["z"] + table["w1"]
    summary = first_stage_summary(make_frame(table, linear_model))
    assert summary.perfect_fit
    assert summary.f_stat == np.finfo(float).max


def test_subsample_ols_matches_subset_regression(frame, linear_table):
    mask = (linear_table["g"] == 0).to_numpy()
    sub = linear_table[mask]
    design = np.column_stack([np.ones(len(sub)), sub["w1"], sub["x"]])
    expected = _ols(design, sub["y"].to_numpy())[2]
    assert subsample_ols(frame, mask).value == pytest.approx(expected, rel=1e-9)


def test_subsample_drops_covariates_constant_on_it(discrete_table, discrete_model):
    frame = make_frame(discrete_table, discrete_model)
    mask = (discrete_table["d"] == 1).to_numpy()
    sub = discrete_table[mask]
    slope = np.polyfit(sub["x"], sub["y"], 1)[0]
    assert subsample_ols(frame, mask).value == pytest.approx(slope, rel=1e-8)


def test_subsample_filter_errors(frame):
    with pytest.raises(FrameError):
        subsample_ols(frame, np.zeros(frame.n, dtype=bool))
    with pytest.raises(FrameError):
        subsample_ols(frame, np.ones(3, dtype=bool))
