import numpy as np
import pytest

from config import BasisConfig
from services.condmean import (
    BasisSpec,
    BasisTerm,
    check_support,
    default_basis,
    fit_condmean_model,
    fit_slope_model,
    make_basis,
    predict_marginal,
    support_levels,
    weighted_quantile,
)
from services.errors import ConfigError, RankError, SupportError
from services.synthlab import population_frame
from conftest import make_frame


def test_weighted_quantile_and_support():
    x = np.array([0.0, 1.0, 1.0, 2.0])
    weights = np.ones(4)
    assert weighted_quantile(x, weights, 0.5) == 1.0
    assert weighted_quantile(x, np.array([10.0, 1.0, 1.0, 1.0]), 0.5) == 0.0
    np.testing.assert_array_equal(support_levels(x, np.array([1.0, 1.0, 1.0, 0.0])), [0.0, 1.0])


def test_default_basis_on_discrete_support():
    x = np.array([0.0, 1.0, 1.0, 2.0])
    basis = default_basis(x, np.ones(4), ["(intercept)", "d"])
    # Steps at 1 and 2 are spanned by the linear term and the hinge at 1
    assert basis.names == ["1", "x", "max(x-1,0)"]
    assert basis.steps == []
    assert basis.terms[1].hetero == (0, 1)


def test_default_basis_keeps_steps_not_spanned():
    x = np.arange(5.0)
    basis = default_basis(x, np.ones(5), ["(intercept)", "d"])
    assert basis.names[2] == "max(x-2,0)"
    assert basis.steps == [2.0, 4.0]
    assert basis.terms[3].hetero == (0,)


def test_default_basis_keeps_steps_with_wider_heterogeneity():
    x = np.array([0.0, 1.0, 1.0, 2.0])
    config = BasisConfig(heterogeneity={"linear": "constant", "step": "full"})
    basis = default_basis(x, np.ones(4), ["(intercept)", "d"], config)
    assert basis.steps == [1.0]


def test_default_basis_skips_endpoint_median():
    x = np.array([0.0, 0.0, 0.0, 1.0])
    basis = default_basis(x, np.ones(4), ["(intercept)"], BasisConfig(steps=False))
    assert basis.kinds == ["constant", "linear"]


def test_default_basis_quantile_steps():
    x = np.arange(10.0)
    basis = default_basis(x, np.ones(10), ["(intercept)"], BasisConfig(hinge_knots=[], step_quantiles=2))
    assert basis.steps == [4.0]


def test_hinge_outside_support_raises():
    x = np.array([0.0, 1.0, 2.0])
    with pytest.raises(SupportError):
        default_basis(x, np.ones(3), ["(intercept)"], BasisConfig(hinge_knots=[5.0]))


def test_basis_needs_constant_and_linear():
    with pytest.raises(ConfigError):
        BasisSpec((BasisTerm("constant"), BasisTerm("hinge", 1.0)))
    with pytest.raises(ConfigError):
        make_basis(["(intercept)"], heterogeneity={"step": ["missing"]}, steps=[1.0])


def test_step_threshold_must_be_a_support_level():
    levels = np.array([0.0, 1.0, 2.0])
    check_support(make_basis(["(intercept)"], steps=[1.0, 2.0]), levels)
    with pytest.raises(SupportError):
        check_support(make_basis(["(intercept)"], steps=[1.5]), levels)
    with pytest.raises(SupportError):
        check_support(make_basis(["(intercept)"], steps=[0.0]), levels)


def test_slope_model_matches_interacted_regression(linear_table, linear_model):
    frame = make_frame(linear_table, linear_model)
    slope = fit_slope_model(frame)
    t = linear_table
    design = np.column_stack([np.ones(len(t)), t["w1"], t["x"], t["w1"] * t["x"]])
    expected, *_ = np.linalg.lstsq(design, t["y"].to_numpy(), rcond=None)
    np.testing.assert_allclose(slope.gamma_a, expected[:2], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(slope.gamma_b, expected[2:], rtol=1e-8, atol=1e-10)
    b = slope.b_ols(frame.w[:3])
    np.testing.assert_allclose(b, expected[2] + expected[3] * t["w1"].to_numpy()[:3], rtol=1e-8)


def test_constant_slope_design(linear_table, linear_model):
    frame = make_frame(linear_table, linear_model)
    slope = fit_slope_model(frame, "constant")
    assert slope.hetero == (0,)
    assert len(slope.gamma_b) == 1


def test_condmean_on_two_level_cells(dgp_a):
    frame = population_frame(dgp_a)
    fit = fit_condmean_model(frame)

    # Steps are spanned by the cell-specific lines on two points per cell
    assert fit.basis.names == ["1", "x"]
    assert len(fit.pruned) == 2
    assert fit.g([0.0, 1.0], [1.0, 0.0]) == pytest.approx([0.0, 1.0], abs=1e-10)
    assert fit.g([0.0, 2.0], [1.0, 1.0]) == pytest.approx([0.0, 4.0], abs=1e-10)
    np.testing.assert_array_equal(fit.support, [0.0, 1.0, 2.0])


def test_marginal_effects_on_three_levels(dgp_b):
    frame = population_frame(dgp_b)
    fit = fit_condmean_model(frame)
    assert fit.pruned == []
    assert fit.basis.names == ["1", "x", "1{x>=2}"]
    assert predict_marginal(fit, 1.0, [1.0]) == pytest.approx(1.5, abs=1e-10)
    assert fit.marginal(2.0, [1.0]) == pytest.approx(1.5, abs=1e-10)


@pytest.mark.parametrize("level", [0.0, 3.0, -1.0])
def test_marginal_outside_support_raises(dgp_b, level):
    fit = fit_condmean_model(population_frame(dgp_b))
    with pytest.raises(SupportError):
        predict_marginal(fit, level, [1.0])


def test_non_step_dependency_raises(dgp_b):
    frame = population_frame(dgp_b)
    basis = make_basis(frame.w_names, hinge_knots=[1.0, 1.5])
    with pytest.raises(RankError) as info:
        fit_condmean_model(frame, basis)
    assert info.value.columns == ["max(x-1.5,0)"]


def test_fitted_values_reproduce_cell_means(discrete_table, discrete_model):
    frame = make_frame(discrete_table, discrete_model)
    basis = make_basis(frame.w_names, [], [1.0, 2.0], {"step": "full"})
    fit = fit_condmean_model(frame, basis)
    means = discrete_table.groupby(["d", "x"])["y"].mean()
    for (d, x), mean in means.items():
        assert fit.g([x], [1.0, d])[0] == pytest.approx(mean, abs=1e-8)


def test_design_product_matches_the_stacked_design(linear_table, linear_model):
    # Setup
    frame = make_frame(linear_table, linear_model)
    fit = fit_condmean_model(frame, make_basis(frame.w_names, [1.0], []))
    coef = np.random.default_rng(2).normal(size=fit.n_coef)
    p_values = fit.basis.evaluate(frame.x)
    stacked = np.column_stack([frame.w] + [
        frame.w[:, list(block.hetero)] * p_values[:, [block.basis_index]] for block in fit.blocks[1:]
    ])

    # Execute
    product = fit.design_product(coef, frame.w, frame.x)

    # Assert
    np.testing.assert_allclose(product, stacked @ coef, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(fit.design_product(fit.coef, frame.w, frame.x), fit.fitted, atol=1e-10)
    assert fit.factor.r.shape == (fit.n_coef, fit.n_coef)
