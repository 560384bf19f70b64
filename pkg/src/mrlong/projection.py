"""Population linear projections on a discrete law and the linear-smoother drift expansion.

When outcome regressions are produced by a linear operator (least squares
on a fixed basis), the bias of the plug-in ``Q_1`` estimator expands into
products of propensity errors and projected outcome errors.  This module
builds those operators exactly on a :class:`~mrlong.discrete_law.DiscreteLaw`
and evaluates both sides of each expansion independently.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .discrete_law import BoundLaw, DiscreteLaw, NuisanceSet, _lift, _prop_error, bias_a, ratio
from .trajectory import ProblemSpec


def default_basis(j: int) -> Callable:
    """``(1, a_j, l_j)`` on the history through ``A_j``."""

    def basis(L, A):
        n = A.shape[0]
        return np.column_stack([np.ones(n), A[:, j - 1].astype(float), L[j - 1][:, 0]])
    return basis


class ProjectionFamily:
    """Weighted least-squares projections onto per-timepoint bases.

    Parameters
    ----------
    law : DiscreteLaw
    spec : ProblemSpec
    bases : list of K callables, optional
        ``bases[j-1](L, A) -> (n, p_j)`` on histories through ``A_j``.
    weights : full-level array, optional
        Measure used for the normal equations.  Defaults to the law's own
        path probabilities, which makes each operator the population
        projection; any other positive measure gives a linear operator of
        the same kind (an empirical least-squares smoother, say).
    """

    def __init__(self, law: DiscreteLaw, spec: ProblemSpec, bases: Sequence[Callable] | None = None,
                 weights: np.ndarray | None = None):
        self.law = law
        self.b: BoundLaw = law.bind(spec)
        K = law.K
        bases = bases or [default_basis(j) for j in range(1, K + 1)]
        self.S = []
        for j in range(1, K + 1):
            L, A = law.grid_arrays(2 * j)
            s = np.asarray(bases[j - 1](L, A), dtype=float)
            self.S.append(s.reshape(law.shape[:2 * j] + (s.shape[1],)))
        self.w = law.prob if weights is None else np.asarray(weights, dtype=float)
        if self.w.shape != law.shape or np.any(self.w < 0):
            raise ValueError("projection weights must be a nonnegative full-level array")
        self._gram = []
        for j in range(1, K + 1):
            wm = self.w.sum(axis=tuple(range(2 * j, law.depth)))
            s = self.S[j - 1].reshape(-1, self.S[j - 1].shape[-1])
            self._gram.append(s.T @ (s * wm.reshape(-1, 1)))

    def project(self, j: int, f: np.ndarray) -> np.ndarray:
        """Project a function of any level onto the basis at ``j``; returns level ``2j``."""
        law = self.law
        D = law.depth
        f = np.broadcast_to(_lift(f, D), law.shape)
        # sum over the trailing axes first, then solve the normal equations
        wf = (self.w * f).sum(axis=tuple(range(2 * j, D)))
        s = self.S[j - 1]
        rhs = np.tensordot(wf, s, axes=(tuple(range(2 * j)), tuple(range(2 * j))))
        beta = np.linalg.solve(self._gram[j - 1], rhs)
        return s @ beta

    # ------------------------------------------------------------------
    # composite operators

    def cond_next(self, f: np.ndarray, j: int) -> np.ndarray:
        """``E_p[f | history through L_{j+1}]``."""
        return self.law.cond(f, 2 * j + 1)

    def dr_step(self, j: int, f: np.ndarray) -> np.ndarray:
        """Project the regime-weighted next-step function: level ``2j+2`` to ``2j``."""
        hr = ratio(self.b.hstar[j], self.law.h[j])
        return self.project(j, self.cond_next(hr * f, j))

    def dr_chain(self, k: int, j: int, f: np.ndarray) -> np.ndarray:
        """Composition of :meth:`dr_step` from ``j-1`` down to ``k``; level ``2j`` to ``2k``."""
        for r in range(j - 1, k - 1, -1):
            f = self.dr_step(r, f)
        return f

    def nabla(self, h_dag, j: int, u: int) -> np.ndarray:
        """Regime-to-working weight over ``j+1..u-1`` times the propensity error at ``u``."""
        b = self.b
        w = ratio(b.pi_star(j + 1, u - 1), b.prod(h_dag, j + 1, u - 1))
        return _lift(w, 2 * u) * _prop_error(b, h_dag, u)

    def mr_step(self, h_dag, j: int, u: int, f: np.ndarray) -> np.ndarray:
        """Project ``E_p[nabla_{j,u} f | history through L_{j+1}]`` at ``j``."""
        return self.project(j, self.cond_next(self.nabla(h_dag, j, u) * f, j))

    def mr_chain(self, h_dag, chain: Sequence[int], f: np.ndarray) -> np.ndarray:
        """Compose :meth:`mr_step` along ``chain = (r_1, ..., r_u, k)``."""
        for a, c in zip(reversed(chain[:-1]), reversed(chain[1:])):
            f = self.mr_step(h_dag, a, c, f)
        return f


@dataclass
class SmootherObjects:
    """Projected outcome regressions of the two linear-smoother recursions."""

    eta_dr: list        # projection of the true next-step pseudo-outcome
    eta_dr_hat: list    # recursion feeding projected regressions forward
    eta_mr_tilde: list  # recursion projecting Q built from projected regressions
    eta_mr: list        # eta_dr plus the projected Q innovation


def smoother_objects(pf: ProjectionFamily, h_dag) -> SmootherObjects:
    b = pf.b
    K = b.K
    eta_dr = [pf.project(j, b.y_next(b.eta_g, j)) for j in range(1, K + 1)]
    hat = [None] * K
    tilde = [None] * K
    mr = [None] * K
    for j in range(K, 0, -1):
        hat[j - 1] = pf.project(j, b.y_next(hat, j))
        q_next = _q_from(b, h_dag, tilde, j + 1)
        tilde[j - 1] = pf.project(j, q_next)
        mr[j - 1] = eta_dr[j - 1] + pf.project(j, q_next - _lift(pf.cond_next(q_next, j), pf.law.depth))
    return SmootherObjects(eta_dr, hat, tilde, mr)


def _q_from(b: BoundLaw, h_dag, eta, j: int) -> np.ndarray:
    """``Q_j`` at full level using ``eta[j-1..K-1]`` (``Q_{K+1} = psi``)."""
    D = b.law.depth
    q = b.psi
    for r in range(b.K, j - 1, -1):
        rr = _lift(ratio(b.hstar[r - 1], h_dag[r - 1]), D)
        q = rr * (q - _lift(eta[r - 1], D)) + _lift(b.y(eta[r - 1], r), D)
    return q


def _bias_weight(b: BoundLaw, h_dag, k: int, denom: str = "dag") -> np.ndarray:
    """``pi*^{k-1}/pi_x^{k-1} (h*_k/h_k - h*_k/h_dag_k)`` with ``pi_x`` working or true."""
    den = b.prod(h_dag, 1, k - 1) if denom == "dag" else b.pi(1, k - 1)
    return _lift(ratio(b.pi_star(1, k - 1), den), 2 * k) * _prop_error(b, h_dag, k)


def nonempty_chains(K: int) -> list[tuple[int, ...]]:
    """Ordered non-empty subsets of ``1..K-1``."""
    out = []
    for u in range(1, K):
        out.extend(itertools.combinations(range(1, K), u))
    return out


@dataclass
class ExpansionCheck:
    lhs: np.ndarray | float
    rhs: np.ndarray | float
    terms: dict

    @property
    def error(self) -> float:
        return float(np.max(np.abs(np.asarray(self.lhs) - np.asarray(self.rhs))))


def regression_error_propagation(pf: ProjectionFamily, h_dag) -> list[ExpansionCheck]:
    """Pointwise expansion of fed-forward regression errors into projected one-step errors."""
    b = pf.b
    ob = smoother_objects(pf, h_dag)
    out = []
    for k in range(1, b.K + 1):
        lhs = ob.eta_dr_hat[k - 1] - b.eta_g[k - 1]
        rhs = ob.eta_dr[k - 1] - b.eta_g[k - 1]
        for j in range(k + 1, b.K + 1):
            rhs = rhs + pf.dr_chain(k, j, ob.eta_dr[j - 1] - b.eta_g[j - 1])
        out.append(ExpansionCheck(lhs, rhs, {}))
    return out


def dr_bias_expansion(pf: ProjectionFamily, h_dag) -> ExpansionCheck:
    """Bias at the fed-forward projected regressions, expanded into propensity x projection terms."""
    b = pf.b
    law = pf.law
    K = b.K
    ob = smoother_objects(pf, h_dag)
    ns = NuisanceSet.from_tables(law, h_dag, ob.eta_dr_hat)
    lhs = bias_a(law, b.spec, ns)
    terms = {}
    for k in range(1, K + 1):
        D = ob.eta_dr[k - 1] - b.eta_g[k - 1]
        terms[(k,)] = law.expect(pf.nabla(h_dag, 0, k) * D)
    for k in range(1, K + 1):
        for j in range(k + 1, K + 1):
            D = ob.eta_dr[j - 1] - b.eta_g[j - 1]
            terms[(k, j)] = law.expect(pf.nabla(h_dag, 0, k) * pf.dr_chain(k, j, D))
    return ExpansionCheck(lhs, sum(terms.values()), terms)


def _mr_terms(pf: ProjectionFamily, h_dag, ob: SmootherObjects, reduce: Callable) -> dict:
    b = pf.b
    K = b.K
    terms = {}
    for k in range(1, K + 1):
        terms[(k,)] = reduce(pf.nabla(h_dag, 0, k) * (ob.eta_mr[k - 1] - b.eta_g[k - 1]))
    for chain in nonempty_chains(K):
        for k in range(chain[-1] + 1, K + 1):
            D = ob.eta_mr[k - 1] - b.eta_g[k - 1]
            inner = pf.mr_chain(h_dag, chain + (k,), D)
            terms[chain + (k,)] = reduce(pf.nabla(h_dag, 0, chain[0]) * inner)
    return terms


def mr_bias_expansion_given_l1(pf: ProjectionFamily, h_dag, denom: str = "dag") -> ExpansionCheck:
    """Expansion of the projected-``Q`` bias conditional on ``L_1`` (level-1 arrays).

    ``denom="true"`` weights the left side by the true propensity product
    instead of the working one; that version is not an identity in general.
    """
    b = pf.b
    law = pf.law
    ob = smoother_objects(pf, h_dag)
    lhs = np.zeros(law.shape[:1])
    for k in range(1, b.K + 1):
        lhs = lhs + law.cond(_bias_weight(b, h_dag, k, denom) * (ob.eta_mr_tilde[k - 1] - b.eta_g[k - 1]), 1)
    terms = _mr_terms(pf, h_dag, ob, lambda f: law.cond(f, 1))
    return ExpansionCheck(lhs, sum(terms.values()), terms)


def mr_bias_expansion(pf: ProjectionFamily, h_dag) -> ExpansionCheck:
    """Bias at the projected-``Q`` regressions, expanded over chains of timepoints."""
    b = pf.b
    law = pf.law
    ob = smoother_objects(pf, h_dag)
    ns = NuisanceSet.from_tables(law, h_dag, ob.eta_mr_tilde)
    lhs = bias_a(law, b.spec, ns)
    terms = _mr_terms(pf, h_dag, ob, law.expect)
    return ExpansionCheck(lhs, sum(terms.values()), terms)


# ---------------------------------------------------------------------------
# hand-expanded small-horizon forms


def explicit_terms(pf: ProjectionFamily, h_dag, flavor: str, printed: bool = False) -> dict:
    """Written-out expansions for ``K = 2`` and ``K = 3``, keyed like the general forms.

    Each term is spelled out with explicit conditional expectations and
    projections rather than the chain operators, so it checks them.
    ``printed=True`` (``MR``, ``K = 3``) uses the true instead of the
    working propensity at timepoint 2 in the ``(1, 3)`` term.
    """
    b = pf.b
    law = pf.law
    K = b.K
    if K not in (2, 3):
        raise ValueError("explicit forms exist for K = 2 and K = 3 only")
    ob = smoother_objects(pf, h_dag)
    eta = ob.eta_dr if flavor == "DR" else ob.eta_mr
    D = [eta[k] - b.eta_g[k] for k in range(K)]
    hs, h = b.hstar, law.h
    e1, e2 = _prop_error(b, h_dag, 1), _prop_error(b, h_dag, 2)
    w2 = _lift(ratio(hs[0], h_dag[0]), 4) * e2  # pi*1/pi_dag1 times error at 2
    E = law.expect

    def P(j, f):
        return pf.project(j, law.cond(f, 2 * j + 1))

    t = {}
    t[(1,)] = E(e1 * D[0])
    t[(2,)] = E(w2 * D[1])
    if flavor == "DR":
        t[(1, 2)] = E(e1 * P(1, ratio(hs[1], h[1]) * D[1]))
    else:
        t[(1, 2)] = E(e1 * P(1, e2 * D[1]))
    if K == 3:
        e3 = _prop_error(b, h_dag, 3)
        w3 = _lift(ratio(hs[0] , h_dag[0]), 6) * _lift(ratio(hs[1], h_dag[1]), 6) * e3
        t[(3,)] = E(w3 * D[2])
        if flavor == "DR":
            r2, r3 = ratio(hs[1], h[1]), ratio(hs[2], h[2])
            t[(2, 3)] = E(w2 * P(2, r3 * D[2]))
            t[(1, 3)] = E(e1 * P(1, r2 * P(2, r3 * D[2])))
        else:
            t[(2, 3)] = E(w2 * P(2, e3 * D[2]))
            t[(1, 2, 3)] = E(e1 * P(1, e2 * P(2, e3 * D[2])))
            mid = ratio(hs[1], h[1]) if printed else ratio(hs[1], h_dag[1])
            t[(1, 3)] = E(e1 * P(1, _lift(mid, 6) * e3 * D[2]))
    return t
