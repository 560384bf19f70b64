"""Exact laws on finite state spaces and brute-force evaluation of bias functionals.

A law is stored as dense conditional tables over the axes
``[L_1, A_1, L_2, ..., A_K, L_{K+1}]``.  A function of the first ``m`` axes
("level ``m``") is an array with ``m`` axes; level ``2k-1`` is the history
through ``L_k`` and level ``2k`` the history through ``A_k``.  Conditional
expectations integrate trailing axes against the law's own tables, so they
are defined on every cell, including cells of probability zero.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .trajectory import ContractError, Dataset, ProblemSpec, Trajectory

STATE_CAP = 10_000_000
FIXTURE_DIR = Path(__file__).parent / "fixtures"


class OracleTooLargeError(ValueError):
    """The enumerated path space exceeds the configured cap."""


class PositivityError(ValueError):
    """A regime-reachable history has zero observational probability."""


class UnidentifiedCellError(ValueError):
    """A conditioning cell needed by a plug-in recursion was never observed."""


def _lift(x: np.ndarray, m: int) -> np.ndarray:
    """Append singleton axes so a level-``x.ndim`` array broadcasts at level ``m``."""
    x = np.asarray(x, dtype=float)
    if x.ndim > m:
        raise ValueError(f"cannot lift a level-{x.ndim} array to level {m}")
    return x.reshape(x.shape + (1,) * (m - x.ndim))


def ratio(num, den) -> np.ndarray:
    """``num / den`` with 0 wherever ``den == 0``.

    Zero denominators only occur on histories that carry no probability
    under the relevant law, where the value is immaterial.
    """
    num, den = np.broadcast_arrays(np.asarray(num, dtype=float), np.asarray(den, dtype=float))
    out = np.zeros(num.shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


class DiscreteLaw:
    """Conditional probability tables of a law ``p = g h`` on finite supports.

    Parameters
    ----------
    l_supports : list of K+1 arrays
        Support of each covariate block, shape ``(n_k, d_k)`` (a 1-d list is
        read as scalar values).
    a_spaces : list of K sequences of int
        Treatment codes; must match the problem's treatment spaces.
    g_tables : list of K+1 arrays
        ``g_tables[k]`` has ``2k+1`` axes: the history through ``A_k`` then
        the value of ``L_{k+1}``.
    h_tables : list of K arrays
        ``h_tables[k-1]`` has ``2k`` axes: the history through ``L_k`` then
        the code of ``A_k``.
    cap : int
        Maximum number of enumerated paths.
    """

    def __init__(self, l_supports, a_spaces, g_tables, h_tables, cap: int = STATE_CAP):
        self.l_supports = [np.asarray(s, dtype=float).reshape(len(s), -1) for s in l_supports]
        self.a_spaces = [tuple(int(a) for a in s) for s in a_spaces]
        self.K = len(self.a_spaces)
        if len(self.l_supports) != self.K + 1:
            raise ContractError("need K+1 covariate supports")
        shape = []
        for k in range(self.K):
            shape += [len(self.l_supports[k]), len(self.a_spaces[k])]
        shape.append(len(self.l_supports[self.K]))
        self.shape = tuple(shape)
        size = int(np.prod(self.shape))
        if size > cap:
            raise OracleTooLargeError(f"oracle too large: {size} paths exceed the cap of {cap}")
        self.g = [np.asarray(t, dtype=float) for t in g_tables]
        self.h = [np.asarray(t, dtype=float) for t in h_tables]
        if len(self.g) != self.K + 1 or len(self.h) != self.K:
            raise ContractError("need K+1 covariate tables and K treatment tables")
        for k, t in enumerate(self.g):
            self._check_table(t, 2 * k + 1, f"g_{k}")
        for k, t in enumerate(self.h, start=1):
            self._check_table(t, 2 * k, f"h_{k}")
        self._bound: dict[int, tuple] = {}

    def _check_table(self, t, level, name):
        if t.shape != self.shape[:level]:
            raise ContractError(f"table {name} has shape {t.shape}, expected {self.shape[:level]}")
        if np.any(t < 0):
            raise ContractError(f"table {name} has negative entries")
        bad = np.abs(t.sum(axis=-1) - 1.0) > 1e-12
        if np.any(bad):
            cell = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ContractError(f"table {name} slice at {cell} does not sum to 1")

    # ------------------------------------------------------------------
    # structure

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def depth(self) -> int:
        return len(self.shape)

    def table(self, axis: int) -> np.ndarray:
        """Conditional table of the variable on ``axis`` (0-based)."""
        return self.g[axis // 2] if axis % 2 == 0 else self.h[(axis + 1) // 2 - 1]

    @cached_property
    def prob(self) -> np.ndarray:
        """Joint path probabilities at full level."""
        return self._partial_kernel(0, self.depth)

    def marginal(self, m: int) -> np.ndarray:
        """Probability of each level-``m`` history."""
        return self.prob.sum(axis=tuple(range(m, self.depth))) if m < self.depth else self.prob

    def cond(self, f, m: int) -> np.ndarray:
        """``E[f | first m axes]`` integrating later axes against the law's tables.

        Parameters
        ----------
        f : array of level ``>= m``
        m : int

        Returns
        -------
        level-``m`` array
        """
        f = np.asarray(f, dtype=float)
        if f.ndim <= m:
            return np.broadcast_to(_lift(f, m), self.shape[:m]).copy()
        lev = f.ndim
        f = np.broadcast_to(f, self.shape[:lev])
        part = self._partial_kernel(m, lev)
        prod = np.where(part > 0, part * f, 0.0)
        return prod.sum(axis=tuple(range(m, lev)))

    def _partial_kernel(self, m: int, lev: int) -> np.ndarray:
        key = (m, lev)
        cache = self.__dict__.setdefault("_pk", {})
        if key not in cache:
            out = np.ones(self.shape[:lev])
            for i in range(m, lev):
                out = out * _lift(self.table(i), lev)
            cache[key] = out
        return cache[key]

    def expect(self, f) -> float:
        """``E_p[f]`` for an array of any level."""
        return float(self.cond(f, 0))

    # ------------------------------------------------------------------
    # grid evaluation

    def grid_arrays(self, level: int) -> tuple[list[np.ndarray], np.ndarray]:
        """Covariate blocks and treatment codes of every level-``level`` cell.

        Returns ``(L, A)`` with ``L`` a list of ``ceil(level/2)`` arrays
        ``(ncells, d_k)`` and ``A`` an ``(ncells, level//2)`` int array, in
        C order of the level's shape.
        """
        shape = self.shape[:level]
        idx = np.indices(shape).reshape(level, -1) if level else np.zeros((0, 1), dtype=int)
        L = [self.l_supports[k][idx[2 * k]] for k in range((level + 1) // 2)]
        A = np.column_stack([np.asarray(self.a_spaces[k])[idx[2 * k + 1]] for k in range(level // 2)]) \
            if level >= 2 else np.zeros((idx.shape[1], 0), dtype=int)
        return L, A.astype(int)

    def tabulate(self, fn: Callable, level: int) -> np.ndarray:
        """Evaluate a history function ``fn(L, A)`` on every level-``level`` cell."""
        L, A = self.grid_arrays(level)
        return np.asarray(fn(L, A), dtype=float).reshape(self.shape[:level])

    def tabulate_density(self, fn: Callable, k: int) -> np.ndarray:
        """Evaluate ``fn(L_hist, A_prev) -> (n, |A_k|)`` into a level-``2k`` table."""
        L, A = self.grid_arrays(2 * k - 1)
        out = np.asarray(fn(L, A), dtype=float)
        return out.reshape(self.shape[:2 * k])

    def indices(self, L: Sequence[np.ndarray], A: np.ndarray) -> tuple:
        """Map a batch of histories to grid indices; off-support values raise."""
        out = []
        for k in range(len(L)):
            supp = self.l_supports[k]
            block = np.asarray(L[k], dtype=float).reshape(len(L[k]), -1)
            hit = np.all(block[:, None, :] == supp[None, :, :], axis=2)
            if not np.all(hit.any(axis=1)):
                row = int(np.flatnonzero(~hit.any(axis=1))[0])
                raise ContractError(f"L{k + 1} value {block[row]} is off the law's support")
            out.append(hit.argmax(axis=1))
            if k < A.shape[1]:
                space = np.asarray(self.a_spaces[k])
                m = A[:, k][:, None] == space[None, :]
                if not np.all(m.any(axis=1)):
                    raise ContractError(f"A{k + 1} code off the law's treatment space")
                out.append(m.argmax(axis=1))
        return tuple(out)

    def table_fn(self, table: np.ndarray) -> Callable:
        """History function reading a level-``m`` table (``m`` = ``table.ndim``)."""
        table = np.asarray(table, dtype=float)

        def fn(L, A):
            idx = self.indices(L, A)
            return table[idx[:table.ndim]]
        return fn

    def density_fn(self, table: np.ndarray) -> Callable:
        """Density function ``(L, A_prev) -> (n, |A_k|)`` reading a level-``2k`` table."""
        table = np.asarray(table, dtype=float)

        def fn(L, A_prev):
            idx = self.indices(L, A_prev)
            return table[idx[:table.ndim - 1]]
        return fn

    def enumerate_paths(self, spec: ProblemSpec, positive_only: bool = False) -> Dataset:
        """Every path as a dataset row weighted by its probability."""
        L, A = self.grid_arrays(self.depth)
        w = self.prob.reshape(-1)
        if positive_only:
            keep = w > 0
            L, A, w = [b[keep] for b in L], A[keep], w[keep]
        return Dataset(L, A, spec, weights=w)

    # ------------------------------------------------------------------
    # binding to a problem

    def bind(self, spec: ProblemSpec) -> "BoundLaw":
        key = id(spec)
        if key not in self._bound or self._bound[key][0] is not spec:
            self._bound[key] = (spec, BoundLaw(self, spec))
        return self._bound[key][1]

    # ------------------------------------------------------------------
    # serialization

    def to_json(self) -> dict:
        def key(idx, level):
            vals = []
            for i in range(level):
                if i % 2 == 0:
                    v = self.l_supports[i // 2][idx[i]]
                    vals.append([float(x) for x in v] if len(v) > 1 else float(v[0]))
                else:
                    vals.append(self.a_spaces[i // 2][idx[i]])
            return json.dumps(vals)

        def dump(t):
            level = t.ndim - 1
            out = {}
            for idx in itertools.product(*[range(s) for s in t.shape[:-1]]):
                out[key(idx, level)] = [float(x) for x in t[idx]]
            return out

        return {
            "supports": [[(list(map(float, v)) if len(v) > 1 else float(v[0])) for v in s] for s in self.l_supports],
            "treatment_spaces": [list(s) for s in self.a_spaces],
            "g_tables": [dump(t) for t in self.g],
            "h_tables": [dump(t) for t in self.h],
        }

    @classmethod
    def from_json(cls, obj: dict, cap: int = STATE_CAP) -> "DiscreteLaw":
        supports = obj["supports"]
        spaces = obj["treatment_spaces"]
        supp_arr = [np.asarray(s, dtype=float).reshape(len(s), -1) for s in supports]
        K = len(spaces)
        shape = []
        for k in range(K):
            shape += [len(supp_arr[k]), len(spaces[k])]
        shape.append(len(supp_arr[K]))

        def index_of(vals):
            idx = []
            for i, v in enumerate(vals):
                if i % 2 == 0:
                    row = np.asarray(v, dtype=float).reshape(-1)
                    hit = np.flatnonzero(np.all(supp_arr[i // 2] == row, axis=1))
                    if hit.size == 0:
                        raise ContractError(f"table key value {v} not in the support of L{i // 2 + 1}")
                    idx.append(int(hit[0]))
                else:
                    if v not in spaces[i // 2]:
                        raise ContractError(f"table key code {v} not in the space of A{i // 2 + 1}")
                    idx.append(spaces[i // 2].index(v))
            return tuple(idx)

        def load(d, level):
            t = np.full(tuple(shape[:level + 1]), np.nan)
            for k, row in d.items():
                vals = json.loads(k)
                if len(vals) != level:
                    raise ContractError(f"table key {k} has the wrong history length")
                t[index_of(vals)] = row
            if np.any(np.isnan(t)):
                raise ContractError("conditional table is missing histories")
            return t

        g = [load(d, 2 * k) for k, d in enumerate(obj["g_tables"])]
        h = [load(d, 2 * k + 1) for k, d in enumerate(obj["h_tables"])]
        return cls(supports, spaces, g, h, cap=cap)


def load_fixture(name: str) -> tuple[DiscreteLaw, ProblemSpec]:
    """Load a shipped fixture (``k1_basic``, ``k2_dropout``, ``k3_general``) or a JSON path."""
    if not name:
        raise ValueError("fixture id must be non-empty")
    path = Path(name)
    if not path.suffix:
        path = FIXTURE_DIR / f"{name}.json"
    if not path.exists():
        known = sorted(p.stem for p in FIXTURE_DIR.glob("*.json"))
        raise FileNotFoundError(f"unknown fixture {name!r}; shipped fixtures: {known}")
    obj = json.loads(path.read_text())
    spec = ProblemSpec.from_config(obj["problem"])
    law = DiscreteLaw.from_json(obj["law"])
    law.bind(spec).check_positivity()
    return law, spec


# ---------------------------------------------------------------------------
# nuisance sets


@dataclass
class NuisanceSet:
    """Working propensities ``h_dag`` and outcome regressions ``eta_dag``.

    Entries are history functions: ``h_dag[k-1](L, A_prev) -> (n, |A_k|)``
    and ``eta_dag[k-1](L, A) -> (n,)``.  ``h_tables``/``eta_tables`` hold the
    same objects tabulated on a law's grid when available.
    """

    h_dag: list
    eta_dag: list
    h_tables: list | None = None
    eta_tables: list | None = None
    label: str = ""

    @classmethod
    def from_tables(cls, law: DiscreteLaw, h_tables, eta_tables, label: str = "") -> "NuisanceSet":
        h_tables = [np.asarray(t, dtype=float) for t in h_tables]
        eta_tables = [np.asarray(t, dtype=float) for t in eta_tables]
        return cls([law.density_fn(t) for t in h_tables], [law.table_fn(t) for t in eta_tables],
                    h_tables, eta_tables, label)

    def tables(self, law: DiscreteLaw) -> tuple[list, list]:
        if self.h_tables is None:
            self.h_tables = [law.tabulate_density(f, k) for k, f in enumerate(self.h_dag, start=1)]
        if self.eta_tables is None:
            self.eta_tables = [law.tabulate(f, 2 * k) for k, f in enumerate(self.eta_dag, start=1)]
        return self.h_tables, self.eta_tables


def true_nuisances(law: DiscreteLaw, spec: ProblemSpec) -> NuisanceSet:
    b = law.bind(spec)
    return NuisanceSet.from_tables(law, law.h, b.eta_g, label="true")


def random_nuisances(law: DiscreteLaw, spec: ProblemSpec, seed, perturb_h: Sequence[bool] | bool = True,
                     perturb_eta: Sequence[bool] | bool = True, eta_noise: float = 0.3,
                     h_noise: float = 0.5) -> NuisanceSet:
    """Seeded perturbation of the true nuisances.

    ``eta = eta_g + U(-eta_noise, eta_noise)`` cellwise and
    ``h = normalize(h * exp(U(-h_noise, h_noise)))``; per-timepoint flags
    select which components are perturbed.
    """
    rng = np.random.default_rng(seed)
    K = law.K
    ph = [perturb_h] * K if isinstance(perturb_h, bool) else list(perturb_h)
    pe = [perturb_eta] * K if isinstance(perturb_eta, bool) else list(perturb_eta)
    b = law.bind(spec)
    hs, es = [], []
    for k in range(K):
        h = law.h[k]
        noise_h = rng.uniform(-h_noise, h_noise, h.shape)
        noise_e = rng.uniform(-eta_noise, eta_noise, b.eta_g[k].shape)
        if ph[k]:
            t = h * np.exp(noise_h)
            t = t / t.sum(axis=-1, keepdims=True)
        else:
            t = h.copy()
        hs.append(t)
        es.append(b.eta_g[k] + noise_e if pe[k] else b.eta_g[k].copy())
    return NuisanceSet.from_tables(law, hs, es, label=f"random seed={seed}")


# ---------------------------------------------------------------------------
# a law bound to a problem


class BoundLaw:
    """Regime tables, outcome table and the true iterated means of a law."""

    def __init__(self, law: DiscreteLaw, spec: ProblemSpec):
        if spec.K != law.K:
            raise ContractError("law and problem have different horizons")
        for k in range(law.K):
            if tuple(spec.treatment_spaces[k]) != law.a_spaces[k]:
                raise ContractError(f"treatment space of A{k + 1} differs between law and problem")
            if spec.l_dims[k] != law.l_supports[k].shape[1]:
                raise ContractError(f"dimension of L{k + 1} differs between law and problem")
        self.law = law
        self.spec = spec
        K = law.K
        self.hstar = [law.tabulate_density(lambda L, A, k=k: spec.hstar(k, L, A), k) for k in range(1, K + 1)]
        L, _ = law.grid_arrays(law.depth)
        self.psi = spec.psi(L).reshape(law.shape)
        # true iterated means eta_g[k-1] at level 2k
        eta = [None] * K
        nxt = self.psi
        for k in range(K, 0, -1):
            eta[k - 1] = self.cond_g(nxt, k)
            if k > 1:
                nxt = self.y(eta[k - 1], k)
        self.eta_g = eta

    @property
    def K(self) -> int:
        return self.law.K

    def cond_g(self, f, k: int) -> np.ndarray:
        """``E_{g_k}[f | history through A_k]`` for a level-``2k+1`` array."""
        return self.law.cond(f, 2 * k)

    def y(self, eta_k: np.ndarray, k: int) -> np.ndarray:
        """Regime average over ``A_k``: level ``2k`` to level ``2k-1``."""
        return np.sum(self.hstar[k - 1] * eta_k, axis=-1)

    def y_next(self, eta: Sequence[np.ndarray], k: int) -> np.ndarray:
        """``y_{k+1}`` at level ``2k+1`` with ``y_{K+1} = psi``."""
        return self.psi if k == self.K else self.y(eta[k], k + 1)

    # products of realized densities, each a level-2k array
    def prod(self, tables: Sequence[np.ndarray], j: int, k: int) -> np.ndarray:
        """``prod_{r=j}^{k} tables[r-1]`` lifted to level ``2k`` (1 if ``j > k``)."""
        if j > k:
            return np.ones(())
        out = np.ones(self.law.shape[:2 * k])
        for r in range(j, k + 1):
            out = out * _lift(tables[r - 1], 2 * k)
        return out

    def pi_star(self, j: int, k: int) -> np.ndarray:
        return self.prod(self.hstar, j, k)

    def pi(self, j: int, k: int) -> np.ndarray:
        return self.prod(self.law.h, j, k)

    @property
    def theta(self) -> float:
        return float(np.sum(self.law.g[0] * self.y(self.eta_g[0], 1)))

    def check_positivity(self) -> None:
        """No regime-reachable path may have zero observational probability."""
        K = self.K
        D = self.law.depth
        gprod = np.ones(self.law.shape)
        for k in range(K + 1):
            gprod = gprod * _lift(self.law.g[k], D)
        reach = (gprod > 0) & (_lift(self.pi_star(1, K), D) > 0)
        bad = reach & (_lift(self.pi(1, K), D) <= 0)
        if np.any(bad):
            cell = tuple(int(i) for i in np.argwhere(bad)[0])
            raise PositivityError(f"positivity fails: regime-reachable path {cell} has zero probability")

    # ------------------------------------------------------------------
    # Q recursion on the grid

    def q_tables(self, h_dag: Sequence[np.ndarray], eta_dag: Sequence[np.ndarray]) -> list[np.ndarray]:
        """``Q_j`` for ``j = 1..K+1`` at full level (index ``j-1``)."""
        K = self.K
        D = self.law.depth
        Q = [None] * (K + 1)
        Q[K] = self.psi
        for j in range(K, 0, -1):
            r = _lift(ratio(self.hstar[j - 1], h_dag[j - 1]), D)
            Q[j - 1] = r * (Q[j] - _lift(eta_dag[j - 1], D)) + _lift(self.y(eta_dag[j - 1], j), D)
        return Q


# ---------------------------------------------------------------------------
# oracle values


def g_formula_theta(law: DiscreteLaw, spec: ProblemSpec) -> float:
    """Exact value of the regime mean by summation over paths."""
    b = law.bind(spec)
    b.check_positivity()
    D = law.depth
    weight = np.ones(law.shape)
    for k in range(law.K + 1):
        weight = weight * _lift(law.g[k], D)
    for k in range(1, law.K + 1):
        weight = weight * _lift(b.hstar[k - 1], D)
    return float(np.sum(weight * b.psi))


def eta_true(law: DiscreteLaw, spec: ProblemSpec, k: int) -> np.ndarray:
    """True iterated mean at timepoint ``k`` as a level-``2k`` table."""
    if not 1 <= k <= law.K:
        raise ContractError(f"timepoint {k} out of range")
    return law.bind(spec).eta_g[k - 1].copy()


def ipw_identity_value(law: DiscreteLaw, spec: ProblemSpec) -> float:
    """``E[psi * pi*^K / pi^K]`` under the observational law."""
    b = law.bind(spec)
    K = law.K
    b.check_positivity()
    ps, p = b.pi_star(1, K), b.pi(1, K)
    return law.expect(_lift(ratio(ps, p), law.depth) * b.psi)


def _delta(b: BoundLaw, eta: Sequence[np.ndarray], k: int) -> np.ndarray:
    """``eta_k - E_{g_k}[y_{k+1}(eta)]`` at level ``2k``."""
    return eta[k - 1] - b.cond_g(b.y_next(eta, k), k)


def d_g(law: DiscreteLaw, spec: ProblemSpec, eta_dag: Sequence[np.ndarray]) -> float:
    """Bias of the outcome-regression plug-in: ``sum_k E[pi*^k delta_k / pi^k]``."""
    b = law.bind(spec)
    eta = [np.asarray(e, dtype=float) for e in eta_dag]
    total = 0.0
    for k in range(1, law.K + 1):
        total += law.expect(ratio(b.pi_star(1, k), b.pi(1, k)) * _delta(b, eta, k))
    return total


def plugin_regime_mean(law: DiscreteLaw, spec: ProblemSpec, eta_dag: Sequence[np.ndarray]) -> float:
    """``E_{g_0}[y_1(eta)]``: the regime mean implied by the outcome regressions alone."""
    b = law.bind(spec)
    return float(np.sum(law.g[0] * b.y(np.asarray(eta_dag[0], dtype=float), 1)))


def _check_dag_positivity(b: BoundLaw, h_dag):
    for k in range(1, b.K + 1):
        reach = (_lift(b.law.marginal(2 * k - 1), 2 * k) > 0) & (b.hstar[k - 1] > 0) \
            & (_lift(b.pi_star(1, k - 1), 2 * k) > 0)
        if np.any(reach & (h_dag[k - 1] <= 0)):
            raise PositivityError(f"working propensity for A{k} is zero where the regime is positive")


def _prop_error(b: BoundLaw, h_dag, k: int) -> np.ndarray:
    """``h*_k/h_k - h*_k/h_dag_k`` at level ``2k``."""
    return ratio(b.hstar[k - 1], b.law.h[k - 1]) - ratio(b.hstar[k - 1], h_dag[k - 1])


def bias_a(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet) -> float:
    """Sum over timepoints of weighted products of propensity and outcome errors."""
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    _check_dag_positivity(b, h_dag)
    total = 0.0
    for k in range(1, law.K + 1):
        w = _lift(ratio(b.pi_star(1, k - 1), b.prod(h_dag, 1, k - 1)), 2 * k)
        total += law.expect(w * _prop_error(b, h_dag, k) * (eta_dag[k - 1] - b.eta_g[k - 1]))
    return total


def gamma_tables(b: BoundLaw, h_dag, eta_dag) -> list[np.ndarray]:
    """``pi*^k (eta_dag_k - E[Q_{k+1} | history through A_k])`` for ``k = 1..K``."""
    Q = b.q_tables(h_dag, eta_dag)
    return [b.pi_star(1, k) * (eta_dag[k - 1] - b.law.cond(Q[k], 2 * k)) for k in range(1, b.K + 1)]


def bias_b(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet) -> float:
    """Decomposition of the same bias through the residuals of the ``Q`` regressions."""
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    _check_dag_positivity(b, h_dag)
    G = gamma_tables(b, h_dag, eta_dag)
    total = 0.0
    for k in range(1, law.K + 1):
        inv = ratio(1.0, law.h[k - 1]) - ratio(1.0, h_dag[k - 1])
        w = _lift(ratio(1.0, b.pi(1, k - 1)), 2 * k)
        total += law.expect(w * inv * G[k - 1])
    return total


def bias_c(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet) -> float:
    """Decomposition through inverse-weight errors times one-step outcome residuals."""
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    _check_dag_positivity(b, h_dag)
    total = 0.0
    for k in range(1, law.K + 1):
        w = ratio(1.0, b.pi(1, k)) - ratio(1.0, b.prod(h_dag, 1, k))
        total += law.expect(w * b.pi_star(1, k) * _delta(b, eta_dag, k))
    return total


def conditional_bias_a_j(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet, j: int,
                         history: Trajectory | None = None):
    """Conditional bias of ``Q_{j+1}`` as a level-``2j`` table, or its value at a history.

    ``j = 0`` returns the unconditional bias.
    """
    if not 0 <= j <= law.K:
        raise ContractError(f"j must lie in 0..K, got {j}")
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    out = np.zeros(law.shape[:2 * j])
    for k in range(j + 1, law.K + 1):
        w = _lift(ratio(b.pi_star(j + 1, k - 1), b.prod(h_dag, j + 1, k - 1)), 2 * k)
        out = out + law.cond(w * _prop_error(b, h_dag, k) * (eta_dag[k - 1] - b.eta_g[k - 1]), 2 * j)
    if history is None:
        return out
    L = [np.atleast_2d(blk) for blk in history.l_blocks[:j]]
    A = np.array([history.a_values[:j]], dtype=int)
    return float(out[law.indices(L, A)]) if j else float(out)


def conditional_q_mean(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet, j: int) -> np.ndarray:
    """``E[Q_{j+1} | history through A_j]`` as a level-``2j`` table."""
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    return law.cond(b.q_tables(h_dag, eta_dag)[j], 2 * j)


def expected_Q1(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet) -> float:
    """``E[Q_1]`` under the observational law."""
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    _check_dag_positivity(b, h_dag)
    return law.expect(b.q_tables(h_dag, eta_dag)[0])


# ---------------------------------------------------------------------------
# drift breakdowns


@dataclass
class DriftBreakdown:
    """Per-term drift values keyed ``"h{j}:eta{k}"`` plus their total."""

    flavor: str
    terms: dict
    total: float
    variant: str = "exact"

    def nonzero(self, tol: float = 1e-12) -> list[str]:
        return [k for k, v in self.terms.items() if abs(v) > tol]


def drift_expected(law: DiscreteLaw, spec: ProblemSpec, ns: NuisanceSet, flavor: str = "MR",
                   variant: str = "exact") -> DriftBreakdown:
    """Term-by-term drift of a plug-in ``Q_1`` estimator.

    Parameters
    ----------
    flavor : {"DR", "MR"}
        ``DR`` pairs each propensity error at ``j`` with each one-step outcome
        residual at ``k >= j`` (``K + K(K-1)/2`` terms, summing to
        :func:`bias_c`).  ``MR`` pairs the propensity error at ``k`` with the
        residual of the ``Q_{k+1}`` regression at ``k`` (``K`` terms, summing to
        :func:`bias_b`).
    variant : {"exact", "horizon"}
        For ``DR`` only: ``horizon`` weights every term by the regime and
        working-propensity products out to ``K`` instead of ``k``.  This
        matches an alternative printed form of the expansion; it agrees with
        the exact form only when the working propensities are correct.
    """
    b = law.bind(spec)
    h_dag, eta_dag = ns.tables(law)
    _check_dag_positivity(b, h_dag)
    K = law.K
    terms: dict = {}
    if flavor == "MR":
        Q = b.q_tables(h_dag, eta_dag)
        for k in range(1, K + 1):
            w = _lift(ratio(b.pi_star(1, k - 1), b.pi(1, k - 1)), 2 * k)
            resid = eta_dag[k - 1] - law.cond(Q[k], 2 * k)
            terms[f"h{k}:eta{k}"] = law.expect(w * _prop_error(b, h_dag, k) * resid)
    elif flavor == "DR":
        if variant not in ("exact", "horizon"):
            raise ValueError(f"unknown variant {variant!r}")
        for k in range(1, K + 1):
            delta = _delta(b, eta_dag, k)
            for j in range(1, k + 1):
                if variant == "exact":
                    w = _lift(ratio(b.pi_star(1, j - 1), b.pi(1, j - 1)), 2 * k) \
                        * _lift(_prop_error(b, h_dag, j), 2 * k) \
                        * ratio(b.pi_star(j + 1, k), b.prod(h_dag, j + 1, k))
                    terms[f"h{j}:eta{k}"] = law.expect(w * delta)
                else:
                    D = 2 * K
                    # pi*^K / (pi^{j-1} pi_dag_{j+1}^K) * (h*_j/h_j - h*_j/h_dag_j) * delta_k
                    num = b.pi_star(1, K)
                    den = _lift(b.pi(1, j - 1), D) * b.prod(h_dag, j + 1, K)
                    w = ratio(num, den) * _lift(_prop_error(b, h_dag, j), D)
                    terms[f"h{j}:eta{k}"] = law.expect(w * _lift(delta, D))
    else:
        raise ValueError(f"flavor must be 'DR' or 'MR', got {flavor!r}")
    return DriftBreakdown(flavor, terms, float(sum(terms.values())), variant)


# ---------------------------------------------------------------------------
# pointwise appendix identities


def inverse_weight_telescoping(b: BoundLaw, h_dag, j: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the telescoping sum of inverse-propensity differences.

    ``sum_{k=j+1}^{s-1} (1/pi_dag_{j+1}^{k-1}) (1/h_k - 1/h_dag_k) (1/pi_{k+1}^{s-1})``
    against ``1/pi_{j+1}^{s-1} - 1/pi_dag_{j+1}^{s-1}``, at level ``2(s-1)``.
    """
    m = 2 * (s - 1)
    lhs = np.zeros(b.law.shape[:m])
    for k in range(j + 1, s):
        term = _lift(ratio(1.0, b.prod(h_dag, j + 1, k - 1)), 2 * k) \
            * (ratio(1.0, b.law.h[k - 1]) - ratio(1.0, h_dag[k - 1]))
        lhs = lhs + _lift(term, m) * ratio(1.0, b.pi(k + 1, s - 1))
    rhs = ratio(1.0, b.pi(j + 1, s - 1)) - ratio(1.0, b.prod(h_dag, j + 1, s - 1))
    return lhs, np.broadcast_to(rhs, lhs.shape)


def weight_ratio_telescoping(b: BoundLaw, h_dag, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the regime-weighted telescoping sum at level ``2j``.

    ``sum_{k=1}^{j} (pi*^{k-1}/pi_dag^{k-1}) (h*_k/h_k - h*_k/h_dag_k) (pi*_{k+1}^j / pi_{k+1}^j)``
    against ``pi*^j/pi^j - pi*^j/pi_dag^j``.
    """
    m = 2 * j
    lhs = np.zeros(b.law.shape[:m])
    for k in range(1, j + 1):
        term = _lift(ratio(b.pi_star(1, k - 1), b.prod(h_dag, 1, k - 1)), 2 * k) * _prop_error(b, h_dag, k)
        lhs = lhs + _lift(term, m) * ratio(b.pi_star(k + 1, j), b.pi(k + 1, j))
    rhs = ratio(b.pi_star(1, j), b.pi(1, j)) - ratio(b.pi_star(1, j), b.prod(h_dag, 1, j))
    return lhs, rhs


def gamma_expansion(b: BoundLaw, h_dag, eta_dag, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the expansion of ``pi*^k (eta_dag_k - eta_g_k)`` in later ``Q`` residuals.

    For ``k = 0`` the left side uses ``E[Q_1]`` in place of ``eta_dag_0`` and
    the regime mean in place of ``eta_g_0``; both sides are scalars.
    """
    law = b.law
    K = b.K
    G = gamma_tables(b, h_dag, eta_dag)
    if k == 0:
        Q = b.q_tables(h_dag, eta_dag)
        lhs = np.asarray(law.expect(Q[0]) - b.theta)
        rhs = np.zeros(())
    else:
        lhs = b.pi_star(1, k) * (eta_dag[k - 1] - b.eta_g[k - 1])
        rhs = G[k - 1].copy()
    for s in range(k + 1, K + 1):
        inv = ratio(1.0, law.h[s - 1]) - ratio(1.0, h_dag[s - 1])
        w = _lift(ratio(1.0, b.pi(k + 1, s - 1)), 2 * s)
        rhs = rhs + law.cond(w * inv * G[s - 1], 2 * k)
    return lhs, rhs


def eta_residual_expansion(b: BoundLaw, eta_dag, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of ``eta_dag_k - eta_g_k = sum_{j>=k} E[(pi*_{k+1}^j/pi_{k+1}^j) delta_j | .]``."""
    law = b.law
    lhs = eta_dag[k - 1] - b.eta_g[k - 1]
    rhs = np.zeros(law.shape[:2 * k])
    for j in range(k, b.K + 1):
        w = ratio(b.pi_star(k + 1, j), b.pi(k + 1, j))
        rhs = rhs + law.cond(w * _delta(b, eta_dag, j), 2 * k)
    return lhs, rhs


# ---------------------------------------------------------------------------
# sampling and plug-in estimation


def sample(law: DiscreteLaw, spec: ProblemSpec, n: int, seed) -> Dataset:
    """Draw ``n`` independent paths by forward sampling the tables."""
    if n < 1:
        raise ValueError("n >= 1 required")
    rng = np.random.default_rng(seed)
    idx = np.zeros((law.depth, n), dtype=int)
    for i in range(law.depth):
        t = law.table(i)
        p = t[tuple(idx[:i])] if i else np.broadcast_to(t, (n, t.shape[0]))
        c = np.cumsum(p, axis=1)
        u = rng.random(n)[:, None] * c[:, -1:]
        idx[i] = np.minimum((c <= u).sum(axis=1), p.shape[1] - 1)
    L = [law.l_supports[k][idx[2 * k]] for k in range(law.K + 1)]
    A = np.column_stack([np.asarray(law.a_spaces[k])[idx[2 * k + 1]] for k in range(law.K)])
    return Dataset(L, A, spec)


def _row_keys(blocks: Sequence[np.ndarray]) -> np.ndarray:
    M = np.column_stack([np.asarray(b, dtype=float).reshape(len(b), -1) for b in blocks])
    return M


def empirical_mle_theta(ds: Dataset, spec: ProblemSpec | None = None) -> float:
    """Plug-in regime mean with every conditional law replaced by empirical frequencies.

    Equivalent to iterated saturated means: the outcome is averaged within
    each observed history cell and the regime average is taken at each step.
    """
    from .trajectory import hstar_matrix, pi_star_batch, with_treatment

    spec = spec or ds.spec
    K = spec.K
    w = ds.weights
    Y = spec.psi(ds.L)
    for k in range(K, 0, -1):
        keys = _row_keys(ds.hist_L(k) + [ds.hist_A(k)])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        wsum = np.bincount(inv, weights=w, minlength=len(uniq))
        ysum = np.bincount(inv, weights=w * np.where(w > 0, Y, 0.0), minlength=len(uniq))
        lookup = {tuple(r): (ysum[i] / wsum[i] if wsum[i] > 0 else None) for i, r in enumerate(uniq)}
        H = hstar_matrix(ds, k)
        reach = (pi_star_batch(ds, 1, k - 1) > 0) & (w > 0)
        newY = np.zeros(ds.n)
        for c, a in enumerate(spec.treatment_spaces[k - 1]):
            need = reach & (H[:, c] > 0)
            if not np.any(need):
                continue
            cf = _row_keys(ds.hist_L(k) + [with_treatment(ds.A, k, a)])
            vals = np.zeros(ds.n)
            for i in np.flatnonzero(need):
                v = lookup.get(tuple(cf[i]))
                if v is None:
                    raise UnidentifiedCellError(
                        f"unidentified cell at timepoint {k}: history {tuple(cf[i])} never observed")
                vals[i] = v
            newY += np.where(need, H[:, c] * vals, 0.0)
        Y = newY
    return ds.mean(Y)


def random_law(sizes: Sequence[int], seed, concentration: float = 3.0,
               h_range: tuple[float, float] = (0.15, 0.85)) -> DiscreteLaw:
    """Seeded law with binary treatments and full positivity.

    Parameters
    ----------
    sizes : K+1 support sizes; block ``k`` takes values ``0..sizes[k]-1``.
    """
    rng = np.random.default_rng(seed)
    K = len(sizes) - 1
    shape = []
    for k in range(K):
        shape += [sizes[k], 2]
    shape.append(sizes[K])
    g, h = [], []
    for k in range(K + 1):
        pre = tuple(shape[:2 * k])
        g.append(rng.dirichlet(np.full(sizes[k], concentration), size=pre or None))
        if k < K:
            p = rng.uniform(*h_range, size=tuple(shape[:2 * k + 1]))
            h.append(np.stack([1 - p, p], axis=-1))
    return DiscreteLaw([list(range(s)) for s in sizes], [[0, 1]] * K, g, h)
