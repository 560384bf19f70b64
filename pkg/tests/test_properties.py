import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import binary_spec
from mrlong.crossfit import make_splits
from mrlong.discrete_law import (bias_a, bias_b, bias_c, expected_Q1, g_formula_theta,
                                 inverse_weight_telescoping, random_law, random_nuisances,
                                 weight_ratio_telescoping)
from mrlong.glm import fit_glm
from mrlong.mr import q_batch
from mrlong.trajectory import RegimeSpec
from oracles import weighted_logistic_problem

seeds = st.integers(0, 2**31 - 1)
sizes = st.lists(st.integers(2, 3), min_size=2, max_size=3)
FAST = settings(max_examples=25, deadline=None)


def _setup(sz, law_seed, stochastic):
    law = random_law(sz, law_seed)
    K = len(sz) - 1
    regime = RegimeSpec.stochastic([{0: "0.4", 1: "0.6"}] * K) if stochastic else None
    return law, binary_spec(K, regime=regime)


@FAST
@given(sz=sizes, law_seed=seeds, ns_seed=seeds, stochastic=st.booleans())
def test_bias_forms_agree(sz, law_seed, ns_seed, stochastic):
    law, spec = _setup(sz, law_seed, stochastic)
    ns = random_nuisances(law, spec, ns_seed)
    a, b, c = bias_a(law, spec, ns), bias_b(law, spec, ns), bias_c(law, spec, ns)
    gap = expected_Q1(law, spec, ns) - g_formula_theta(law, spec)
    assert abs(a - b) < 1e-10 and abs(a - c) < 1e-10 and abs(gap - a) < 1e-10


@FAST
@given(sz=sizes, law_seed=seeds, ns_seed=seeds)
def test_q_forms_agree(sz, law_seed, ns_seed):
    law, spec = _setup(sz, law_seed, False)
    paths = law.enumerate_paths(spec, positive_only=True)
    ns = random_nuisances(law, spec, ns_seed)
    rec = q_batch(paths, ns, 1, "recursive")
    for form in ("sum", "telescoped"):
        np.testing.assert_allclose(q_batch(paths, ns, 1, form), rec, rtol=0, atol=1e-10)


@FAST
@given(sz=sizes, law_seed=seeds, ns_seed=seeds, stochastic=st.booleans())
def test_weight_telescoping(sz, law_seed, ns_seed, stochastic):
    law, spec = _setup(sz, law_seed, stochastic)
    b = law.bind(spec)
    h, _ = random_nuisances(law, spec, ns_seed).tables(law)
    K = law.K
    for s in range(2, K + 2):
        for j in range(0, s - 1):
            lhs, rhs = inverse_weight_telescoping(b, h, j, s)
            np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)
    for j in range(1, K + 1):
        lhs, rhs = weight_ratio_telescoping(b, h, j)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


@FAST
@given(law_seed=seeds, stochastic=st.booleans())
def test_regime_weight_products_chain(law_seed, stochastic):
    law, spec = _setup([2, 2, 2, 2], law_seed, stochastic)
    b = law.bind(spec)
    # pi*(1,3) = pi*(1,1) * pi*(2,3), with the shorter product broadcast over later axes
    left = b.pi_star(1, 1).reshape(b.pi_star(1, 1).shape + (1,) * 4)
    np.testing.assert_allclose(b.pi_star(1, 3), left * b.pi_star(2, 3), rtol=0, atol=1e-14)


@FAST
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_glm_weight_scaling(seed, scale):
    X, y, w = weighted_logistic_problem(seed, n=80, p=3)
    a = fit_glm(X, y, w, link="logit")
    b = fit_glm(X, y, scale * w, link="logit")
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-7, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 500), U=st.integers(2, 10), seed=seeds)
def test_split_sizes_balanced(n, U, seed):
    if n < U:
        return
    plan = make_splits(n, U, seed)
    counts = np.bincount(plan.assignment, minlength=U)
    assert counts.max() - counts.min() <= 1 and counts.min() >= 1
    assert sorted(np.concatenate([plan.rows(u) for u in range(U)])) == list(range(n))
