import numpy as np
import pytest
from scipy.special import expit

from oracles import dense_newton_logistic, trust_region_logistic, weighted_logistic_problem
from mrlong.glm import (LinkRangeError, SingularDesignError, fit_glm, fit_multinomial, fit_scalar_extension,
                        get_link, predict, score)


@pytest.mark.parametrize("seed", range(3))
def test_logistic_matches_two_independent_maximizers(seed):
    X, y, w = weighted_logistic_problem(seed)
    fit = fit_glm(X, y, w, link="logit")
    assert fit.converged
    np.testing.assert_allclose(fit.coefficients, dense_newton_logistic(X, y, w), atol=1e-6)
    np.testing.assert_allclose(fit.coefficients, trust_region_logistic(X, y, w), atol=1e-6)


def test_weighted_ols_matches_normal_equations():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = rng.normal(size=50)
    w = rng.uniform(0.1, 2, 50)
    ref = np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * y))
    np.testing.assert_allclose(fit_glm(X, y, w).coefficients, ref, atol=1e-8)


def test_intercept_only_logit_recovers_logit_of_mean():
    y = np.array([1, 1, 1, 0.0])
    fit = fit_glm(np.ones((4, 1)), y, link="logit")
    assert fit.coefficients[0] == pytest.approx(np.log(3.0), abs=1e-10)


def test_weight_scaling_leaves_coefficients_unchanged():
    X, y, w = weighted_logistic_problem(7, n=120)
    a = fit_glm(X, y, w, link="logit").coefficients
    b = fit_glm(X, y, 1000.0 * w, link="logit").coefficients
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_score_is_zero_at_the_fit_including_offset():
    X, y, w = weighted_logistic_problem(8, n=150)
    off = np.linspace(-0.5, 0.5, 150)
    fit = fit_glm(X, y, w, off, link="logit")
    assert np.max(np.abs(score(X, y, w, off, fit.coefficients, "logit"))) < 1e-10


def test_zero_weight_rows_drop_out():
    X, y, w = weighted_logistic_problem(9, n=100)
    w[:30] = 0.0
    X2 = X.copy()
    X2[:30] = np.nan
    a = fit_glm(X2, y, w, link="logit").coefficients
    b = fit_glm(X[30:], y[30:], w[30:], link="logit").coefficients
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_singular_design_raises_or_falls_back_to_ridge():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    y = np.arange(10.0)
    with pytest.raises(SingularDesignError):
        fit_glm(X, y)
    fit = fit_glm(X, y, on_singular="ridge")
    assert fit.diagnostics["ridge"] == 1e-8 and fit.diagnostics["messages"]


def test_range_policy_for_bounded_link():
    X = np.ones((3, 1))
    y = np.array([0.2, 0.4, 1.5])
    with pytest.raises(LinkRangeError):
        fit_glm(X, y, link="logit", range_policy="strict")
    fit = fit_glm(X, y, link="logit")
    assert fit.diagnostics["out_of_range"] == 1
    assert expit(fit.coefficients[0]) == pytest.approx(0.7, abs=1e-10)


def test_separation_is_flagged():
    X = np.column_stack([np.ones(6), [-3, -2, -1, 1, 2, 3.0]])
    y = np.array([0, 0, 0, 1, 1, 1.0])
    fit = fit_glm(X, y, link="logit")
    assert not fit.converged and fit.diagnostics["separated"]


def test_scalar_extension_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert fit_scalar_extension(y, np.zeros(3), np.ones(3)) == pytest.approx(2.0)
    # the fitted coefficient solves the offset score equation
    rng = np.random.default_rng(0)
    yb = rng.uniform(size=40)
    off = rng.normal(size=40)
    z = rng.uniform(1, 3, 40)
    lam, fit = fit_scalar_extension(yb, off, z, link="logit", return_fit=True)
    assert abs(np.mean(z * (yb - expit(off + lam * z)))) < 1e-10
    assert fit.coefficients.shape == (1,)


def test_predict_examples():
    fit = fit_glm(np.ones((4, 1)), np.array([1, 1, 1, 0.0]), link="logit")
    assert predict(fit, [1.0]) == pytest.approx(0.75)
    assert predict(fit, np.ones((2, 1)), offset=np.log(1 / 3)).tolist() == pytest.approx([0.5, 0.5])


def test_log_link_and_unknown_link():
    X = np.ones((4, 1))
    fit = fit_glm(X, np.array([1, 2, 3, 6.0]), link="log")
    assert np.exp(fit.coefficients[0]) == pytest.approx(3.0, abs=1e-9)
    with pytest.raises(ValueError):
        get_link("probit")


def test_multinomial_intercept_recovers_class_frequencies():
    labels = np.array([0, 1, 1, 2, 2, 2])
    fit = fit_multinomial(np.ones((6, 1)), labels, 3)
    np.testing.assert_allclose(fit.predict_proba(np.ones((1, 1)))[0], [1 / 6, 2 / 6, 3 / 6], atol=1e-9)
