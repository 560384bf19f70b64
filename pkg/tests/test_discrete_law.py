import json

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import binary_spec
from mrlong.discrete_law import (DiscreteLaw, NuisanceSet, OracleTooLargeError, PositivityError,
                                 UnidentifiedCellError, bias_a, bias_b, bias_c, d_g, drift_expected,
                                 empirical_mle_theta, eta_true, expected_Q1, g_formula_theta,
                                 ipw_identity_value, load_fixture, plugin_regime_mean, random_law,
                                 random_nuisances, sample, true_nuisances)
from mrlong.trajectory import ContractError, Dataset, RegimeSpec


def point_mass_law():
    # L1 = 1, A1 = 1, L2 = 0.4 with probability one
    g = [np.array([0.0, 1.0]), np.array([[[0.0, 1.0]] * 2] * 2)]
    h = [np.array([[0.0, 1.0], [0.0, 1.0]])]
    return DiscreteLaw([[0, 1], [0.1, 0.4]], [[0, 1]], g, h)


def test_hand_example_theta(k1):
    law, spec = k1
    assert g_formula_theta(law, spec) == pytest.approx(0.75, abs=1e-14)


def test_regime_free_outcome():
    law = random_law([2, 3], seed=1)
    # make L2 independent of (L1, A1)
    law.g[1][...] = np.array([0.2, 0.5, 0.3])
    for regime in (RegimeSpec.static([0]), RegimeSpec.static([1]), RegimeSpec.stochastic([{0: "0.3", 1: "0.7"}])):
        assert g_formula_theta(law, binary_spec(1, regime=regime)) == pytest.approx(1.1, abs=1e-14)


def test_point_mass_law():
    law = point_mass_law()
    spec = binary_spec(1)
    assert g_formula_theta(law, spec) == pytest.approx(0.4)
    ds = sample(law, spec, 5, seed=0)
    assert np.all(ds.L[0] == 1) and np.all(ds.A == 1) and np.all(ds.L[1] == 0.4)
    assert empirical_mle_theta(ds.subset([0])) == pytest.approx(0.4)


def test_constant_outcome_gives_constant_regressions(k3):
    law, _ = k3
    spec = binary_spec(3, psi="2.5 + 0 * L4", regime=RegimeSpec.static([1, 0, 1]))
    for k in (1, 2, 3):
        np.testing.assert_allclose(eta_true(law, spec, k), 2.5, atol=1e-13)


def test_final_regression_is_one_step_mean(k1):
    law, spec = k1
    eta = eta_true(law, spec, 1)
    # P(L2 = 1 | L1, A1) = 0.2 + 0.5 A1 + 0.1 L1
    np.testing.assert_allclose(eta, [[0.2, 0.7], [0.3, 0.8]], atol=1e-14)


def test_ipw_identity(k2, k3):
    for law, spec in (k2, k3):
        assert ipw_identity_value(law, spec) == pytest.approx(g_formula_theta(law, spec), abs=1e-12)
    # observational regime: h* = h gives the plain mean of the outcome
    law = random_law([2, 2], seed=4)
    p1 = law.h[0][:, 1]
    obs = binary_spec(1, regime=RegimeSpec.stochastic([{0: f"1 - ({p1[0]} + ({p1[1] - p1[0]}) * L1)",
                                                        1: f"{p1[0]} + ({p1[1] - p1[0]}) * L1"}]))
    assert g_formula_theta(law, obs) == pytest.approx(float(np.sum(law.prob * law.bind(obs).psi)), abs=1e-14)


def test_positivity_violation_raises():
    law = random_law([2, 2], seed=3)
    law.h[0][:, 1] = 0.0
    law.h[0][:, 0] = 1.0
    with pytest.raises(PositivityError):
        ipw_identity_value(law, binary_spec(1))


def test_oracle_cap():
    with pytest.raises(OracleTooLargeError, match="oracle too large"):
        DiscreteLaw([[0, 1]] * 3, [[0, 1]] * 2, [None] * 3, [None] * 2, cap=10)


def test_table_contracts():
    law = random_law([2, 2], seed=0)
    bad = law.to_json()
    first = next(iter(bad["h_tables"][0]))
    bad["h_tables"][0][first] = [0.7, 0.7]
    with pytest.raises(ContractError, match="does not sum to 1"):
        DiscreteLaw.from_json(bad)
    again = DiscreteLaw.from_json(json.loads(json.dumps(law.to_json())))
    np.testing.assert_array_equal(again.prob, law.prob)


def test_outcome_plugin_bias_cases(k3):
    law, spec = k3
    b = law.bind(spec)
    theta = g_formula_theta(law, spec)
    assert d_g(law, spec, b.eta_g) == pytest.approx(0.0, abs=1e-14)
    # shifting only the last regression by c shifts both sides by c
    shifted = list(b.eta_g)
    shifted[-1] = shifted[-1] + 0.05
    lhs = plugin_regime_mean(law, spec, shifted) - theta
    assert lhs == pytest.approx(d_g(law, spec, shifted), abs=1e-12)
    for seed in range(5):
        eta = random_nuisances(law, spec, seed).tables(law)[1]
        assert plugin_regime_mean(law, spec, eta) - theta == pytest.approx(d_g(law, spec, eta), abs=1e-12)


def test_single_timepoint_shift_moves_plugin_by_the_shift(k1):
    law, spec = k1
    eta = [eta_true(law, spec, 1) + 0.05]
    assert plugin_regime_mean(law, spec, eta) - 0.75 == pytest.approx(0.05, abs=1e-14)
    assert d_g(law, spec, eta) == pytest.approx(0.05, abs=1e-14)


@pytest.mark.parametrize("perturb_h,perturb_eta", [(False, True), (True, False)])
def test_bias_forms_vanish_when_one_side_is_true(k3, perturb_h, perturb_eta):
    law, spec = k3
    ns = random_nuisances(law, spec, 11, perturb_h=perturb_h, perturb_eta=perturb_eta)
    for f in (bias_a, bias_b, bias_c):
        assert f(law, spec, ns) == pytest.approx(0.0, abs=1e-13)


def test_q_mean_under_partial_correctness(k2):
    law, spec = k2
    theta = g_formula_theta(law, spec)
    assert expected_Q1(law, spec, true_nuisances(law, spec)) == pytest.approx(theta, abs=1e-13)
    # h_1 true and eta_2 true, the other two perturbed
    ns = random_nuisances(law, spec, 5, perturb_h=[False, True], perturb_eta=[True, False])
    assert expected_Q1(law, spec, ns) == pytest.approx(theta, abs=1e-10)
    ns = random_nuisances(law, spec, 6)
    assert expected_Q1(law, spec, ns) - theta == pytest.approx(bias_a(law, spec, ns), abs=1e-12)


def test_dag_positivity_required(k2):
    law, spec = k2
    ns = random_nuisances(law, spec, 0)
    h, eta = ns.tables(law)
    h = [t.copy() for t in h]
    h[0][..., 1] = 0.0
    h[0][..., 0] = 1.0
    with pytest.raises(PositivityError):
        bias_a(law, spec, NuisanceSet.from_tables(law, h, eta))


def test_drift_structure(k2, k3):
    law, spec = k2
    assert not drift_expected(law, spec, true_nuisances(law, spec), "MR").nonzero()
    assert not drift_expected(law, spec, true_nuisances(law, spec), "DR").nonzero()
    ns = random_nuisances(law, spec, 3, perturb_h=[True, False])
    assert drift_expected(law, spec, ns, "MR").nonzero() == ["h1:eta1"]
    law, spec = k3
    ns = random_nuisances(law, spec, 4)
    dr, mr = drift_expected(law, spec, ns, "DR"), drift_expected(law, spec, ns, "MR")
    assert len(dr.terms) == 6 and len(mr.terms) == 3
    assert dr.total == pytest.approx(bias_a(law, spec, ns), abs=1e-12)
    assert mr.total == pytest.approx(bias_a(law, spec, ns), abs=1e-12)
    with pytest.raises(ValueError):
        drift_expected(law, spec, ns, "XR")


def test_horizon_variant_differs_unless_propensities_true(k3):
    law, spec = k3
    ns = random_nuisances(law, spec, 8)
    exact = drift_expected(law, spec, ns, "DR")
    horizon = drift_expected(law, spec, ns, "DR", variant="horizon")
    assert abs(exact.total - horizon.total) > 1e-6
    ns = random_nuisances(law, spec, 8, perturb_h=False)
    assert drift_expected(law, spec, ns, "DR", variant="horizon").total == pytest.approx(0.0, abs=1e-13)


def test_sampling_frequencies_match_the_law(k1):
    law, spec = k1
    ds = sample(law, spec, 100_000, seed=2026)
    idx = law.indices(ds.L, ds.A)
    counts = np.zeros(law.shape)
    np.add.at(counts, idx, 1)
    p = law.prob.reshape(-1)
    keep = p > 0
    assert counts.reshape(-1)[~keep].sum() == 0
    res = chisquare(counts.reshape(-1)[keep], 100_000 * p[keep])
    assert res.pvalue > 0.001


def test_sample_rejects_empty_and_is_seeded(k2):
    law, spec = k2
    with pytest.raises(ValueError):
        sample(law, spec, 0, seed=1)
    a, b = sample(law, spec, 50, seed=9), sample(law, spec, 50, seed=9)
    np.testing.assert_array_equal(a.A, b.A)


def test_empirical_plugin(k2):
    law, spec = k2
    paths = law.enumerate_paths(spec)
    assert empirical_mle_theta(paths) == pytest.approx(g_formula_theta(law, spec), abs=1e-12)
    ds = sample(law, spec, 100_000, seed=1)
    assert abs(empirical_mle_theta(ds) - g_formula_theta(law, spec)) < 0.01


def test_unidentified_cell_is_reported():
    spec = binary_spec(1)
    ds = Dataset([np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]])], np.array([[1], [0]]), spec)
    with pytest.raises(UnidentifiedCellError, match="timepoint 1"):
        empirical_mle_theta(ds)


def test_fixture_errors():
    with pytest.raises(ValueError):
        load_fixture("")
    with pytest.raises(FileNotFoundError, match="shipped fixtures"):
        load_fixture("k9_missing")
