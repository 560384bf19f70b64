import numpy as np
import pytest
from scipy.special import expit

from conftest import binary_spec
from mrlong.discrete_law import sample
from mrlong.propensity import (PropensityFit, PropensityFitError, PropensityModel, fit_propensities, pi_hat,
                               pi_of_history)
from mrlong.trajectory import ContractError, Dataset, ProblemSpec, RegimeSpec, Trajectory


def logistic_data(n, alpha, seed):
    rng = np.random.default_rng(seed)
    L1 = rng.normal(size=(n, 1))
    A1 = rng.binomial(1, expit(alpha[0] + alpha[1] * L1[:, 0]))
    return Dataset([L1, rng.normal(size=(n, 1))], A1[:, None], binary_spec(1))


def test_recovers_true_coefficients():
    alpha = np.array([-0.3, 0.8])
    ds = logistic_data(10_000, alpha, seed=0)
    pf = fit_propensities(ds, PropensityModel([["1", "L1"]]))
    assert np.max(np.abs(pf.fits[0].coefficients - alpha)) < 0.05


def test_intercept_only_gives_sample_frequency():
    ds = logistic_data(500, [0.2, 0.0], seed=1)
    pf = fit_propensities(ds, PropensityModel([["1"]]))
    assert pf.h_at(ds, 1, 1)[0] == pytest.approx(ds.A[:, 0].mean(), abs=1e-10)


def test_all_treated_reports_separation():
    base = logistic_data(50, [0.0, 0.0], seed=2)
    ds = Dataset(base.L, np.ones_like(base.A), base.spec)
    with pytest.raises(PropensityFitError, match="timepoint 1.*separation"):
        fit_propensities(ds, PropensityModel([["1", "L1"]]))
    pf = fit_propensities(ds, PropensityModel([["1", "L1"]]), errors="warn")
    assert pf.diagnostics["issues"]


def test_future_reading_basis_rejected():
    with pytest.raises(ContractError, match="reads the future"):
        PropensityModel([["1", "L2"]]).check(binary_spec(1))
    with pytest.raises(ContractError):
        PropensityModel([["1"], ["A2"]]).check(binary_spec(2))


def dropout_fit(k2, n=2000, seed=3):
    law, spec = k2
    ds = sample(law, spec, n, seed)
    model = PropensityModel([["1", "L1"], ["1", "L1", "L2"]], monotone=True)
    return law, spec, ds, fit_propensities(ds, model)


def test_pi_hat_products_on_dropout(k2):
    law, spec, ds, pf = dropout_fit(k2)
    traj = Trajectory([ds.L[0][0, 0], ds.L[1][0, 0], ds.L[2][0, 0]], [1, 1])
    one = Dataset([b[:1] for b in ds.L], np.ones((1, 2), dtype=int), spec)
    h1 = pf.h_at(one, 1, 1)[0]
    h2 = pf.h_at(one, 2, 1)[0]
    assert pi_hat(pf, traj, 1, 2).value == pytest.approx(h1 * h2)
    assert pi_hat(pf, traj, 2, 1) == (1.0, 1.0)
    with pytest.raises(ContractError):
        pi_hat(pf, traj, 1, 3)


def test_monotone_model_puts_no_mass_on_return(k2):
    law, spec, ds, pf = dropout_fit(k2)
    stopped = ds.A[:, 0] == 0
    assert np.all(pf.h_at(ds, 2, 1)[stopped] == 0.0)
    assert np.all(pf.h_at(ds, 2, 0)[stopped] == 1.0)


def test_fitted_propensities_approach_the_law(k2):
    law, spec, ds, pf = dropout_fit(k2, n=20_000, seed=4)
    truth = law.density_fn(law.h[0])(ds.hist_L(1), ds.hist_A(0))
    fitted = pf.h_matrix(ds, 1)
    # the k2 fixture's first treatment model is logistic in L1
    assert np.max(np.abs(truth - fitted)) < 0.03


def test_truncated_products_factor_exactly():
    spec = binary_spec(3)
    rng = np.random.default_rng(5)
    ds = Dataset([rng.normal(size=(30, 1)) for _ in range(4)], np.ones((30, 3), dtype=int), spec)
    tiny = lambda L, A: np.column_stack([1 - np.full(len(L[0]), 1e-9), np.full(len(L[0]), 1e-9)])
    half = lambda L, A: np.full((len(L[0]), 2), 0.5)
    pf = PropensityFit.from_functions(spec, [half, tiny, half])
    np.testing.assert_allclose(pf.pi_hat(ds, 1, 3), pf.pi_hat(ds, 1, 2) * pf.pi_hat(ds, 3, 3))
    assert pf.pi_hat(ds, 1, 3)[0] == pytest.approx(0.25 * 1e-6)
    assert pf.pi_raw(ds, 1, 3)[0] == pytest.approx(0.25 * 1e-9)
    assert pf.n_truncated(ds) == 30


def test_multinomial_treatment():
    rng = np.random.default_rng(6)
    n = 3000
    L1 = rng.normal(size=(n, 1))
    p = np.column_stack([np.ones(n), np.exp(0.5 * L1[:, 0]), np.exp(-0.5 + 0 * L1[:, 0])])
    p /= p.sum(axis=1, keepdims=True)
    A = np.array([rng.choice(3, p=row) for row in p])
    spec = ProblemSpec(1, [[0, 1, 2]], [1, 1], "L2", RegimeSpec.static([2]))
    ds = Dataset([L1, rng.normal(size=(n, 1))], A[:, None], spec)
    pf = fit_propensities(ds, PropensityModel([["1", "L1"]]))
    assert np.max(np.abs(pf.h_matrix(ds, 1) - p)) < 0.05
    np.testing.assert_allclose(pf.h_matrix(ds, 1).sum(axis=1), 1.0)


def test_pi_of_history_matches_dataset_products(k2):
    law, spec, ds, pf = dropout_fit(k2, n=300)
    np.testing.assert_allclose(pi_of_history(pf, ds.L, ds.A, 1, 2), pf.pi_hat(ds, 1, 2))
