import numpy as np
import pytest

from conftest import binary_spec
from mrlong.discrete_law import random_law, random_nuisances, true_nuisances
from mrlong.trajectory import RegimeSpec
from mrlong.projection import (ProjectionFamily, dr_bias_expansion, explicit_terms, mr_bias_expansion,
                               mr_bias_expansion_given_l1, nonempty_chains, regression_error_propagation)


def perturbed_measure(law, seed=1):
    return law.prob * np.random.default_rng(seed).uniform(0.5, 1.5, law.shape)


@pytest.fixture(scope="module")
def k2_random():
    law = random_law([2, 3, 2], seed=21)
    return law, binary_spec(2, regime=RegimeSpec.static([1, 0]))


def test_chain_enumeration():
    assert nonempty_chains(1) == []
    assert nonempty_chains(3) == [(1,), (2,), (1, 2)]


def test_projection_reproduces_basis_functions(k3):
    law, spec = k3
    pf = ProjectionFamily(law, spec)
    s = pf.S[1][..., 2]
    np.testing.assert_allclose(pf.project(2, s), s, atol=1e-12)
    with pytest.raises(ValueError):
        ProjectionFamily(law, spec, weights=-law.prob)


@pytest.mark.parametrize("measure", ["law", "perturbed"])
def test_expansions_hold_on_general_fixture(k3, measure):
    law, spec = k3
    w = None if measure == "law" else perturbed_measure(law)
    pf = ProjectionFamily(law, spec, weights=w)
    for seed in range(3):
        h = random_nuisances(law, spec, seed).tables(law)[0]
        for chk in regression_error_propagation(pf, h):
            assert chk.error < 1e-9
        assert dr_bias_expansion(pf, h).error < 1e-9
        assert mr_bias_expansion_given_l1(pf, h).error < 1e-9
        assert mr_bias_expansion(pf, h).error < 1e-9


def test_true_propensities_give_zero_bias(k3):
    law, spec = k3
    pf = ProjectionFamily(law, spec, weights=perturbed_measure(law))
    h = true_nuisances(law, spec).tables(law)[0]
    for fn in (dr_bias_expansion, mr_bias_expansion):
        chk = fn(pf, h)
        assert abs(chk.lhs) < 1e-13 and all(abs(v) < 1e-13 for v in chk.terms.values())


def test_term_counts(k3):
    law, spec = k3
    pf = ProjectionFamily(law, spec)
    h = random_nuisances(law, spec, 0).tables(law)[0]
    assert len(dr_bias_expansion(pf, h).terms) == 6
    # singletons plus every chain ending after its last element
    assert len(mr_bias_expansion(pf, h).terms) == 3 + 2 + 1 + 1


def test_given_l1_with_true_propensity_denominator_is_not_an_identity(k2_random):
    law, spec = k2_random
    pf = ProjectionFamily(law, spec, weights=perturbed_measure(law))
    h = random_nuisances(law, spec, 2).tables(law)[0]
    assert mr_bias_expansion_given_l1(pf, h).error < 1e-12
    assert mr_bias_expansion_given_l1(pf, h, denom="true").error > 1e-6


@pytest.mark.parametrize("flavor", ["DR", "MR"])
def test_written_out_terms_match_general_terms(k2_random, k3, flavor):
    for law, spec in (k2_random, k3):
        pf = ProjectionFamily(law, spec, weights=perturbed_measure(law))
        h = random_nuisances(law, spec, 3).tables(law)[0]
        general = (dr_bias_expansion if flavor == "DR" else mr_bias_expansion)(pf, h).terms
        explicit = explicit_terms(pf, h, flavor)
        assert set(explicit) == set(general)
        for key in explicit:
            assert explicit[key] == pytest.approx(general[key], abs=1e-12)


def test_printed_three_step_cross_term_differs(k3):
    law, spec = k3
    pf = ProjectionFamily(law, spec, weights=perturbed_measure(law))
    h = random_nuisances(law, spec, 3).tables(law)[0]
    general = mr_bias_expansion(pf, h).terms[(1, 3)]
    printed = explicit_terms(pf, h, "MR", printed=True)[(1, 3)]
    assert abs(printed - general) > 1e-7


def test_written_out_forms_limited_to_small_horizons():
    law = random_law([2, 2], seed=0)
    spec = binary_spec(1)
    pf = ProjectionFamily(law, spec)
    with pytest.raises(ValueError):
        explicit_terms(pf, law.h, "DR")
