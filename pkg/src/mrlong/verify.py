"""Exact identity suites run against a discrete law.

Each check evaluates two independently computed sides of an identity and
records the largest discrepancy over the seeded nuisance sets it was run
on.  The command line ``verify`` command and the acceptance tests share
these suites.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .discrete_law import (DiscreteLaw, bias_a, bias_b, bias_c, conditional_bias_a_j, conditional_q_mean,
                           d_g, drift_expected, eta_residual_expansion, expected_Q1, g_formula_theta,
                           gamma_expansion, inverse_weight_telescoping, load_fixture, plugin_regime_mean,
                           random_nuisances, sample, weight_ratio_telescoping)
from .ice import IceModelSet
from .mr import dropout_equation_chain, estimate_mr_greedy, estimate_reg_mr, q_batch
from .projection import (ProjectionFamily, dr_bias_expansion, explicit_terms, mr_bias_expansion,
                         mr_bias_expansion_given_l1, regression_error_propagation)
from .propensity import PropensityModel, fit_propensities
from .trajectory import ProblemSpec

IDENTITY_TOL = 1e-10
EXPANSION_TOL = 1e-9
SCORE_TOL = 1e-8


@dataclass
class Check:
    name: str
    error: float
    tol: float
    runs: int = 1
    skipped: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.skipped) or bool(np.isfinite(self.error) and self.error <= self.tol)

    @property
    def status(self) -> str:
        if self.skipped:
            return "skip"
        return "pass" if self.passed else "FAIL"

    def row(self) -> dict:
        return {"check": self.name, "max_error": self.error, "tol": self.tol, "runs": self.runs,
                "status": self.status, "note": self.skipped}


class _Collector:
    def __init__(self):
        self.errors: dict[str, list[float]] = {}
        self.tols: dict[str, float] = {}

    def add(self, name: str, err, tol: float) -> None:
        self.errors.setdefault(name, []).append(float(err))
        self.tols[name] = tol

    def checks(self) -> list[Check]:
        return [Check(k, float(np.max(v)), self.tols[k], len(v)) for k, v in self.errors.items()]


def _gap(lhs, rhs, mask=None) -> float:
    d = np.abs(np.asarray(lhs, dtype=float) - np.asarray(rhs, dtype=float))
    if mask is not None:
        d = d[np.broadcast_to(mask, d.shape)]
    return float(np.max(d)) if d.size else 0.0


def nuisance_identities(law: DiscreteLaw, spec: ProblemSpec, seeds: Iterable[int] = range(50),
                        tol: float = IDENTITY_TOL) -> list[Check]:
    """Bias representations, ``Q`` forms and pointwise telescoping identities.

    Runs every check for each seeded perturbation of the true nuisances.
    Conditional identities are compared on histories the regime reaches,
    which is the premise under which they are stated.
    """
    b = law.bind(spec)
    K = law.K
    theta = g_formula_theta(law, spec)
    paths = law.enumerate_paths(spec, positive_only=True)
    out = _Collector()
    for seed in seeds:
        ns = random_nuisances(law, spec, seed)
        h, eta = ns.tables(law)
        out.add("plugin bias = outcome-residual sum", plugin_regime_mean(law, spec, eta) - theta
                - d_g(law, spec, eta), tol)
        gap = expected_Q1(law, spec, ns) - theta
        a, bb, c = bias_a(law, spec, ns), bias_b(law, spec, ns), bias_c(law, spec, ns)
        out.add("E[Q1] - theta = product-error sum", gap - a, tol)
        out.add("product form = Q-residual form", a - bb, tol)
        out.add("product form = one-step-residual form", a - c, tol)
        for j in range(1, K):
            lhs = conditional_bias_a_j(law, spec, ns, j)
            rhs = conditional_q_mean(law, spec, ns, j) - b.eta_g[j - 1]
            out.add("conditional bias of Q_{j+1}", _gap(lhs, rhs, b.pi_star(1, j) > 0), tol)
        Q = [q_batch(paths, ns, 1, form) for form in ("recursive", "sum", "telescoped")]
        out.add("Q1 recursive = sum form", _gap(Q[0], Q[1]), tol)
        out.add("Q1 recursive = telescoped form", _gap(Q[0], Q[2]), tol)
        for s in range(2, K + 2):
            for j in range(0, s - 1):
                out.add("inverse-weight telescoping", _gap(*inverse_weight_telescoping(b, h, j, s)), tol)
        for j in range(1, K + 1):
            out.add("regime-weight telescoping", _gap(*weight_ratio_telescoping(b, h, j)), tol)
        for k in range(0, K + 1):
            out.add("regression-residual expansion", _gap(*gamma_expansion(b, h, eta, k)), tol)
        for k in range(1, K + 1):
            lhs, rhs = eta_residual_expansion(b, eta, k)
            out.add("outcome error = later one-step residuals", _gap(lhs, rhs, b.pi_star(1, k) > 0), tol)
        dr = drift_expected(law, spec, ns, "DR")
        mr = drift_expected(law, spec, ns, "MR")
        out.add("DR drift terms sum to one-step form", dr.total - c, tol)
        out.add("MR drift terms sum to Q-residual form", mr.total - bb, tol)
        out.add("drift term counts", 0.0 if (len(dr.terms), len(mr.terms)) == (K + K * (K - 1) // 2, K)
                else np.inf, tol)
    return out.checks()


def expansion_identities(law: DiscreteLaw, spec: ProblemSpec, seeds: Iterable[int] = range(5),
                         tol: float = EXPANSION_TOL) -> list[Check]:
    """Linear-smoother drift expansions, general and written-out forms.

    Runs each seed twice: with the law's own probabilities as the
    projection measure, and with a seeded reweighting so that the ``Q``
    innovation is not annihilated by the projection.  The projections act
    on every history, so the expansions need every treatment level to have
    positive probability; otherwise a single skipped check is returned.
    """
    K = law.K
    if not full_positivity(law):
        return [Check("linear-smoother expansions", float("nan"), tol, 0,
                      skipped="needs positive treatment probabilities on every history")]
    out = _Collector()
    for seed in seeds:
        ns = random_nuisances(law, spec, seed)
        h, _ = ns.tables(law)
        rng = np.random.default_rng([seed, 1])
        for weights in (None, law.prob * rng.uniform(0.5, 1.5, law.shape)):
            pf = ProjectionFamily(law, spec, weights=weights)
            for chk in regression_error_propagation(pf, h):
                out.add("fed-forward regression error expansion", chk.error, tol)
            dr = dr_bias_expansion(pf, h)
            out.add("DR smoother bias expansion", dr.error, tol)
            out.add("MR smoother bias expansion given L1", mr_bias_expansion_given_l1(pf, h).error, tol)
            mr = mr_bias_expansion(pf, h)
            out.add("MR smoother bias expansion", mr.error, tol)
            if K in (2, 3):
                for flavor, general in (("DR", dr), ("MR", mr)):
                    explicit = explicit_terms(pf, h, flavor)
                    same_keys = set(explicit) == set(general.terms)
                    err = max(abs(explicit[key] - general.terms[key]) for key in explicit) if same_keys else np.inf
                    out.add(f"{flavor} written-out terms = general terms", err, tol)
    return out.checks()


def _names(spec: ProblemSpec, k: int) -> list[str]:
    d = spec.l_dims[k - 1]
    return [f"L{k}"] if d == 1 else [f"L{k}_{i}" for i in range(1, d + 1)]


def default_models(spec: ProblemSpec, link: str = "logit", monotone: bool = False):
    """Cumulative main-effect working models: nested outcome bases, matching treatment bases."""
    terms, bases = ["1"], []
    for k in range(1, spec.K + 1):
        terms = terms + _names(spec, k)
        bases.append(list(terms))
    return IceModelSet(bases, link=link), PropensityModel([list(t) for t in bases], monotone=monotone)


def estimator_identities(ds, spec: ProblemSpec, models: IceModelSet, pmodel: PropensityModel,
                         tol: float = IDENTITY_TOL, score_tol: float = SCORE_TOL) -> list[Check]:
    """Dual-route and score-equation identities of the two range-respecting estimators."""
    pf = fit_propensities(ds, pmodel, errors="warn")
    out = _Collector()
    reg = estimate_reg_mr(ds, spec, models, pf)
    out.add("weighted-regression dual path", reg.diagnostics["dual_path_gap"], tol)
    out.add("weighted-regression estimate = mean Q1", reg.diagnostics["q_identity_gap"], tol)
    greedy = estimate_mr_greedy(ds, spec, models, pf)
    out.add("greedy estimate = mean Q1", greedy.diagnostics["q_identity_gap"], tol)
    for j, v in greedy.diagnostics["tau_score"].items():
        out.add("greedy score against pseudo-outcome", v, score_tol)
    for j, v in greedy.diagnostics["q_score"].items():
        out.add("greedy score against Q", v, score_tol)
    is_dropout = (spec.K == 2 and models.link == "logit" and pmodel.monotone
                  and all(sorted(s) == [0, 1] for s in spec.treatment_spaces))
    if is_dropout:
        for name, v in dropout_equation_chain(ds, models, pf, greedy).items():
            out.add(f"dropout equation chain {name}", v, score_tol)
    return out.checks()


def run_fixture_suite(fixture: str, seeds: int = 50, expansion_seeds: int = 5, n: int = 200,
                      seed: int = 0) -> list[Check]:
    """Every suite that applies to a shipped fixture or a law file."""
    law, spec = load_fixture(fixture)
    checks = nuisance_identities(law, spec, range(seeds))
    checks += expansion_identities(law, spec, range(expansion_seeds))
    monotone = fixture_is_dropout(law, spec)
    models, pmodel = default_models(spec, "logit" if _psi_in_unit(law, spec) else "identity", monotone)
    ds = sample(law, spec, n, seed)
    checks += estimator_identities(ds, spec, models, pmodel)
    return checks


def fixture_is_dropout(law: DiscreteLaw, spec: ProblemSpec) -> bool:
    """Binary treatments whose law never returns to 1 after a 0."""
    if any(sorted(s) != [0, 1] for s in spec.treatment_spaces):
        return False
    for k in range(2, law.K + 1):
        h = law.h[k - 1]
        idx = [slice(None)] * h.ndim
        idx[2 * k - 3] = law.a_spaces[k - 2].index(0)
        idx[-1] = law.a_spaces[k - 1].index(1)
        if np.any(h[tuple(idx)] > 0):
            return False
    return True


def full_positivity(law: DiscreteLaw) -> bool:
    return all(bool(np.all(h > 0)) for h in law.h)


def _psi_in_unit(law: DiscreteLaw, spec: ProblemSpec) -> bool:
    psi = law.bind(spec).psi
    return bool(np.all((psi >= 0) & (psi <= 1)))


def all_passed(checks: Sequence[Check]) -> bool:
    return all(c.passed for c in checks)
