import resource
import time

import numpy as np
import pandas as pd
import pytest

from services.condmean import fit_condmean_model, fit_slope_model, linear_basis
from services.data import build_frame
from services.decomp import COMPONENTS, beta_ols_c, beta_ols_cl, decompose, fit_models, resolve_mode
from services.errors import FrameError
from services.projection import residualize_frame
from services.synthlab import population_dataset, population_estimates
from services.weights import group_weights, treatment_level_weights
from conftest import make_frame


def _did_frame(dgp, mode):
    config = dgp.model.copy(update={"weights": "pmf", "mode": mode})
    return build_frame(population_dataset(dgp), config)


def test_two_cell_population_coefficients(dgp_a):
    result = population_estimates(dgp_a)
    assert result.beta_ols.value == pytest.approx(9 / 5, abs=1e-10)
    assert result.beta_c.value == pytest.approx(5 / 3, abs=1e-10)
    assert result.beta_cl.value == pytest.approx(5 / 3, abs=1e-10)
    assert result.beta_iv.value == pytest.approx(5 / 3, abs=1e-10)
    assert result.components["covariate_weight"] == pytest.approx(-2 / 15, abs=1e-10)
    assert result.components["treatment_level_weight"] == pytest.approx(0.0, abs=1e-10)
    assert result.components["marginal_effect"] == pytest.approx(0.0, abs=1e-10)
    assert result.mode == "standard"
    assert result.mode_source == "declared"


def test_single_cell_population_coefficients(dgp_b):
    result = population_estimates(dgp_b)
    assert result.beta_ols.value == pytest.approx(1.5, abs=1e-10)
    assert result.beta_c.value == pytest.approx(1.5, abs=1e-10)
    assert result.beta_cl.value == pytest.approx(1.5, abs=1e-10)
    assert result.beta_iv.value == pytest.approx(1.0, abs=1e-10)
    assert result.components["marginal_effect"] == pytest.approx(-0.5, abs=1e-10)


def test_components_telescope(discrete_table, discrete_model):
    result = decompose(make_frame(discrete_table, discrete_model))
    assert sum(result.components.values()) == pytest.approx(result.total, abs=1e-12)
    assert result.total == pytest.approx(result.beta_iv.value - result.beta_ols.value, abs=1e-12)
    assert result.joint_vcov.shape == (4, 4)
    np.testing.assert_allclose(result.joint_vcov, result.joint_vcov.T)
    for name in COMPONENTS + ("total",):
        assert result.component_ses[name] >= 0
    assert result.pruned == []
    assert result.n == len(discrete_table)


def test_standalone_coefficients_match_joint_fit(discrete_table, discrete_model):
    frame = make_frame(discrete_table, discrete_model)
    result = decompose(frame)
    fits = result.fits
    c = beta_ols_c(fits.rframe, fits.slope)
    cl = beta_ols_cl(fits.rframe, fits.cm)
    assert c.value == pytest.approx(result.beta_c.value, rel=1e-12)
    assert cl.value == pytest.approx(result.beta_cl.value, rel=1e-12)
    assert c.se == pytest.approx(result.beta_c.se, rel=1e-10)
    assert cl.se == pytest.approx(result.beta_cl.se, rel=1e-10)


def test_basis_mismatch_is_refused(discrete_table, discrete_model):
    frame = make_frame(discrete_table, discrete_model)
    rframe = residualize_frame(frame, linear_basis(frame.w_names))
    cm = fit_condmean_model(frame)
    with pytest.raises(FrameError):
        beta_ols_cl(rframe, cm)


def test_plugin_and_corrected_comparison(discrete_table, discrete_model):
    assert decompose(make_frame(discrete_table, discrete_model)).se_comparison == {}
    result = decompose(make_frame(discrete_table, discrete_model), compare_se=True)
    assert set(result.se_comparison) == {"beta_ols", "beta_c", "beta_cl", "beta_iv"}
    corrected = decompose(make_frame(discrete_table, discrete_model), regime="corrected", compare_se=True)
    assert corrected.se_comparison == {}
    assert corrected.beta_iv.value == pytest.approx(result.beta_iv.value, rel=1e-12)
    for name, ses in result.se_comparison.items():
        assert ses["corrected"] == pytest.approx(corrected.coefficients[name].se, rel=1e-10)


def test_to_dict_layout(dgp_a):
    payload = population_estimates(dgp_a).to_dict()
    assert list(payload["coefficients"]) == ["beta_ols", "beta_c", "beta_cl", "beta_iv"]
    assert payload["joint_vcov"]["order"] == ["beta_ols", "beta_c", "beta_cl", "beta_iv"]
    assert payload["total_gap"]["value"] == pytest.approx(-2 / 15, abs=1e-10)
    assert payload["mode"] == "standard"


def test_auto_mode_switches_to_did(dgp_c):
    frame = _did_frame(dgp_c, "auto")
    assert frame.mode == "standard"
    resolved = resolve_mode(frame)
    assert resolved.mode == "did-rd"
    assert resolved.mode_source == "forced"
    assert resolved.did_check == "verified"


def test_declared_standard_mode_is_refused_for_did_designs(dgp_c):
    with pytest.raises(FrameError):
        decompose(_did_frame(dgp_c, "standard"))


def test_did_iv_uses_unresidualized_outcome(dgp_c):
    fits = fit_models(_did_frame(dgp_c, "did-rd"))
    result = decompose(fits.frame, compare_se=True)
    frame = fits.frame
    z_t = fits.rframe.z_t
    expected = np.sum(frame.weights * frame.y * z_t) / np.sum(frame.weights * frame.x * z_t)
    assert result.mode == "did-rd"
    assert result.beta_iv.value == pytest.approx(expected, rel=1e-10)
    assert result.se_comparison == {}


def test_slope_design_override(discrete_table, discrete_model):
    frame = make_frame(discrete_table, discrete_model)
    result = decompose(frame, slope_design="constant")
    slope = fit_slope_model(frame, "constant")
    rframe = result.fits.rframe
    b = slope.b_ols(frame.w)
    expected = np.sum(b * rframe.x_t * rframe.z_t) / np.sum(rframe.x_t * rframe.z_t)
    assert result.beta_c.value == pytest.approx(expected, rel=1e-10)


SEEDS = range(100)
TOL = 1e-8


def _random_table(seed):
    """Integer treatment on five levels, three covariate cells and a continuous covariate"""
    rng = np.random.default_rng(1000 + seed)
    n = 240
    d = rng.integers(0, 3, size=n)
    w1 = rng.normal(size=n)
    z = rng.normal(size=n) + 0.3 * d
    u = rng.normal(size=n)
    x = np.clip(rng.integers(0, 4, size=n) + (z > 0) + (u > 1), 0, 4).astype(float)
    y = 1 + 0.5 * w1 + d + (1 + 0.3 * d) * x + 0.2 * x ** 2 + u + rng.normal(scale=0.5, size=n)
    return pd.DataFrame({"y": y, "x": x, "xz": x, "z": z, "w1": w1, "d": d.astype(float)})


def _model(saturated=False, instrument="z"):
    covariates = [{"kind": "categorical", "column": "d"}]
    if not saturated:
        covariates.append("w1")
    return {
        "outcome": "y",
        "treatment": "x",
        "instruments": [instrument],
        "covariates": covariates,
        "groups": "d",
        "mode": "standard",
    }


def _close(a, b):
    return a == pytest.approx(b, rel=TOL, abs=TOL)


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_telescope_and_weights_sum_to_one(seed):
    # Setup
    frame = make_frame(_random_table(seed), _model())

    # Execute
    result = decompose(frame)
    rframe = result.fits.rframe
    profile = treatment_level_weights(rframe)
    rows = group_weights(rframe, result.fits.frame.groups)

    # Assert
    assert _close(sum(result.components.values()), result.total)
    assert _close(result.total, result.beta_iv.value - result.beta_ols.value)
    assert _close(result.components["covariate_weight"], result.beta_c.value - result.beta_ols.value)
    assert _close(float(profile.ols_weights.sum()), 1.0)
    assert _close(float(profile.iv_weights.sum()), 1.0)
    assert _close(sum(row.ols_weight for row in rows), 1.0)
    assert _close(sum(row.iv_weight for row in rows), 1.0)
    assert _close(sum(row.share for row in rows), 1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_constant_slope_has_no_covariate_component(seed):
    result = decompose(make_frame(_random_table(seed), _model()), slope_design="constant")
    assert _close(result.beta_c.value, result.beta_ols.value)
    assert _close(result.components["covariate_weight"], 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_linear_basis_has_no_level_component(seed):
    frame = make_frame(_random_table(seed), _model())
    result = decompose(frame, slope_design="full", basis=linear_basis(frame.w_names))
    assert _close(result.beta_cl.value, result.beta_c.value)
    assert _close(result.components["treatment_level_weight"], 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_treatment_as_its_own_instrument(seed):
    # Setup
    frame = make_frame(_random_table(seed), _model(instrument="xz"))

    # Execute
    result = decompose(frame)
    rframe = result.fits.rframe
    profile = treatment_level_weights(rframe)
    rows = group_weights(rframe, result.fits.frame.groups)

    # Assert
    assert _close(result.beta_iv.value, result.beta_ols.value)
    assert _close(result.total, 0.0)
    np.testing.assert_allclose(profile.iv_weights, profile.ols_weights, rtol=TOL, atol=TOL)
    for row in rows:
        assert _close(row.iv_weight, row.ols_weight)


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_affine_invariance(seed):
    # Setup
    table = _random_table(seed)
    shifted = table.assign(y=3.0 - 2.0 * table["y"], x=2.5 * table["x"] - 1.0)
    shifted["xz"] = shifted["x"]

    # Execute
    base = decompose(make_frame(table, _model()))
    moved = decompose(make_frame(shifted, _model()))

    # Assert
    for name, estimate in base.coefficients.items():
        assert _close(moved.coefficients[name].value, -2.0 / 2.5 * estimate.value)
    for name in COMPONENTS:
        assert _close(moved.components[name], -2.0 / 2.5 * base.components[name])


@pytest.mark.parametrize("seed", SEEDS)
def test_random_frames_saturated_groups_average_subsample_slopes(seed):
    # Setup
    frame = make_frame(_random_table(seed), _model(saturated=True))

    # Execute
    result = decompose(frame)
    rows = group_weights(result.fits.rframe, result.fits.frame.groups, with_subsample=True)

    # Assert
    assert all(row.subsample is not None for row in rows)
    assert _close(sum(row.ols_weight * row.subsample.value for row in rows), result.beta_ols.value)
    assert _close(sum(row.iv_weight * row.subsample.value for row in rows), result.beta_c.value)


def test_duplicating_every_cluster_leaves_estimates_and_ses_unchanged(discrete_table, discrete_model):
    # Setup
    table = discrete_table.assign(cl=(np.arange(len(discrete_table)) % 60).astype(float))
    doubled = pd.concat([table, table], ignore_index=True)

    # Execute
    base = decompose(make_frame(table, discrete_model, cluster="cl"))
    copy = decompose(make_frame(doubled, discrete_model, cluster="cl"))

    # Assert
    assert copy.n == 2 * base.n
    assert copy.n_clusters == base.n_clusters == 60
    for name, estimate in base.coefficients.items():
        assert copy.coefficients[name].value == pytest.approx(estimate.value, rel=1e-9)
        assert copy.coefficients[name].se == pytest.approx(estimate.se, rel=1e-8)
    for name in COMPONENTS:
        assert copy.component_ses[name] == pytest.approx(base.component_ses[name], rel=1e-8)
    base_levels = treatment_level_weights(base.fits.rframe)
    copy_levels = treatment_level_weights(copy.fits.rframe)
    np.testing.assert_allclose(copy_levels.table()["iv_se"], base_levels.table()["iv_se"], rtol=1e-8)


@pytest.mark.slow
def test_large_frame_stays_within_time_and_memory_budget():
    # Setup
    rng = np.random.default_rng(99)
    n, p = 200_000, 20
    w = rng.normal(size=(n, p))
    z = rng.normal(size=n) + 0.2 * w[:, 0]
    x = np.clip(rng.integers(0, 4, size=n) + (z > 0), 0, 4).astype(float)
    y = x + 0.3 * w[:, 1] * x + w.sum(axis=1) + rng.normal(size=n)
    table = pd.DataFrame(w, columns=[f"w{j}" for j in range(p)]).assign(y=y, x=x, z=z)
    model = {"outcome": "y", "treatment": "x", "instruments": ["z"], "covariates": [f"w{j}" for j in range(p)]}
    frame = make_frame(table, model)
    peak_before = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    start = time.perf_counter()

    # Execute
    result = decompose(frame)

    # Assert
    elapsed = time.perf_counter() - start
    growth_mb = (resource.getrusage(resource.RUSAGE_SELF).ru_maxrss - peak_before) / 1024
    assert np.isfinite(result.beta_cl.se)
    assert elapsed < 120
    assert growth_mb < 1500
