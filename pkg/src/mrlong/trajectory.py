"""Longitudinal records, target regimes, and the regime product machinery.

Timepoints are 1-based.  A record holds covariate blocks ``L_1..L_{K+1}``
and treatments ``A_1..A_K``; treatments are integer codes from a finite
set per timepoint, so integrals over a treatment are finite sums.

Functions of a history ``(a_1..a_k, l_1..l_k)`` are passed around as
callables ``f(L, A)`` where ``L`` is a list of ``k`` arrays of shape
``(n, d_j)`` and ``A`` is an ``(n, k)`` integer array; they return ``(n,)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expr import Expression

HistoryFn = Callable[[Sequence[np.ndarray], np.ndarray], np.ndarray]


class ContractError(ValueError):
    """Raised when an operation is called outside its declared domain."""


class DatasetError(ValueError):
    """Raised when a dataset does not conform to its problem specification."""


# ---------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class _RegimeStep:
    kind: str
    value: object
    source: object = None


class RegimeSpec:
    """Per-timepoint target treatment densities.

    Each timepoint is one of

    * ``static``: a fixed code ``a_k*``;
    * ``dynamic``: a function of the history returning a code;
    * ``stochastic``: a function of the history returning an
      ``(n, |A_k|)`` matrix of probabilities, columns ordered as the
      treatment space.

    All kinds normalize to a density table over the treatment space.
    """

    def __init__(self, steps: Sequence[_RegimeStep]):
        self.steps = tuple(steps)

    @property
    def K(self) -> int:
        return len(self.steps)

    @classmethod
    def static(cls, codes: Sequence[int]) -> "RegimeSpec":
        return cls([_RegimeStep("static", int(a), int(a)) for a in codes])

    @classmethod
    def dynamic(cls, rules: Sequence[HistoryFn | str]) -> "RegimeSpec":
        steps = []
        for r in rules:
            if isinstance(r, str):
                e = Expression(r)
                steps.append(_RegimeStep("dynamic", (lambda e: lambda L, A: e.evaluate(L, A))(e), r))
            else:
                steps.append(_RegimeStep("dynamic", r))
        return cls(steps)

    @classmethod
    def stochastic(cls, probs: Sequence[Callable | dict]) -> "RegimeSpec":
        """Build a stochastic regime.

        Each entry is either a callable ``f(L, A_prev) -> (n, m)`` or a dict
        mapping treatment codes to probability expressions.
        """
        steps = []
        for p in probs:
            if isinstance(p, dict):
                exprs = {int(c): Expression(s) for c, s in p.items()}
                steps.append(_RegimeStep("stochastic", exprs, {str(c): s for c, s in p.items()}))
            else:
                steps.append(_RegimeStep("stochastic", p))
        return cls(steps)

    @classmethod
    def mixed(cls, steps: Sequence["RegimeSpec"]) -> "RegimeSpec":
        """Concatenate single-step regimes into one regime."""
        return cls([s for r in steps for s in r.steps])

    def density(self, k: int, L: Sequence[np.ndarray], A_prev: np.ndarray,
                space: Sequence[int]) -> np.ndarray:
        """Return ``h_k*(a | history)`` for every code ``a`` in ``space``.

        Parameters
        ----------
        k : int
            Timepoint, 1-based.
        L : list of k arrays
        A_prev : (n, k-1) int array
        space : sequence of int
            Treatment codes of timepoint ``k``.

        Returns
        -------
        (n, len(space)) array whose rows sum to one.
        """
        step = self.steps[k - 1]
        n = L[0].shape[0]
        space = list(space)
        if step.kind == "static":
            out = np.zeros((n, len(space)))
            if step.value not in space:
                raise ContractError(f"static code {step.value} not in treatment space of A{k}")
            out[:, space.index(step.value)] = 1.0
            return out
        if step.kind == "dynamic":
            codes = np.rint(np.asarray(step.value(L, A_prev), dtype=float)).astype(int)
            out = np.zeros((n, len(space)))
            for j, a in enumerate(space):
                out[:, j] = codes == a
            bad = out.sum(axis=1) != 1
            if np.any(bad):
                raise ContractError(f"dynamic rule for A{k} returned a code outside the treatment space")
            return out
        if isinstance(step.value, dict):
            out = np.zeros((n, len(space)))
            for c, e in step.value.items():
                if c not in space:
                    raise ContractError(f"stochastic regime names code {c} outside A{k}'s space")
                out[:, space.index(c)] = e.evaluate(L, A_prev, n)
        else:
            out = np.asarray(step.value(L, A_prev), dtype=float).reshape(n, len(space))
        if np.any(out < -1e-12) or np.any(np.abs(out.sum(axis=1) - 1.0) > 1e-10):
            raise ContractError(f"stochastic regime for A{k} is not a density")
        return out

    def to_config(self) -> list:
        cfg = []
        for s in self.steps:
            if s.source is None:
                raise ContractError("regime built from callables cannot be serialized")
            cfg.append({"kind": s.kind, "value": s.source})
        return cfg

    @classmethod
    def from_config(cls, cfg: Sequence[dict]) -> "RegimeSpec":
        parts = []
        for item in cfg:
            kind = item["kind"]
            if kind == "static":
                parts.append(cls.static([item["value"]]))
            elif kind == "dynamic":
                parts.append(cls.dynamic([item["value"]]))
            elif kind == "stochastic":
                parts.append(cls.stochastic([item["value"]]))
            else:
                raise ContractError(f"unknown regime kind {kind!r}")
        return cls.mixed(parts)


# ---------------------------------------------------------------------------
# problem and records


class ProblemSpec:
    """Horizon, treatment spaces, block dimensions, outcome functional and regime.

    Parameters
    ----------
    K : int
    treatment_spaces : sequence of sequences of int
    l_dims : sequence of int
        Dimensions ``d_1..d_{K+1}``.
    psi : callable or str
        Outcome functional of ``L_1..L_{K+1}``; a string is parsed with the
        expression grammar.
    regime : RegimeSpec
    """

    def __init__(self, K: int, treatment_spaces: Sequence[Sequence[int]], l_dims: Sequence[int],
                 psi: Callable | str, regime: RegimeSpec):
        if K < 1:
            raise ContractError("K >= 1 required")
        if len(treatment_spaces) != K or len(l_dims) != K + 1:
            raise ContractError("need K treatment spaces and K+1 block dimensions")
        if regime.K != K:
            raise ContractError("regime must cover all K timepoints")
        self.K = int(K)
        self.treatment_spaces = tuple(tuple(int(a) for a in s) for s in treatment_spaces)
        self.l_dims = tuple(int(d) for d in l_dims)
        self.regime = regime
        if isinstance(psi, str):
            e = Expression(psi)
            if any(r.kind == "A" for r in e.refs):
                raise ContractError("psi may only read covariate blocks")
            self.psi_source: str | None = psi
            self._psi = lambda L: e.evaluate(L, None)
        else:
            self.psi_source = None
            self._psi = psi

    def psi(self, L: Sequence[np.ndarray]) -> np.ndarray:
        return np.asarray(self._psi(L), dtype=float)

    def hstar(self, k: int, L: Sequence[np.ndarray], A_prev: np.ndarray) -> np.ndarray:
        """Density matrix of the regime at timepoint ``k`` over the treatment space."""
        return self.regime.density(k, L, A_prev, self.treatment_spaces[k - 1])

    def code_index(self, k: int, codes: np.ndarray) -> np.ndarray:
        space = np.asarray(self.treatment_spaces[k - 1])
        idx = np.searchsorted(np.sort(space), codes)
        order = np.argsort(space)
        idx = np.clip(idx, 0, len(space) - 1)
        col = order[idx]
        if np.any(space[col] != codes):
            raise ContractError(f"treatment code outside the space of A{k}")
        return col

    def to_config(self) -> dict:
        if self.psi_source is None:
            raise ContractError("psi given as a callable cannot be serialized")
        return {"K": self.K, "treatment_spaces": [list(s) for s in self.treatment_spaces],
                "l_dims": list(self.l_dims), "psi": self.psi_source,
                "regime": self.regime.to_config()}

    @classmethod
    def from_config(cls, cfg: dict) -> "ProblemSpec":
        return cls(cfg["K"], cfg["treatment_spaces"], cfg["l_dims"], cfg["psi"],
                   RegimeSpec.from_config(cfg["regime"]))


@dataclass(frozen=True)
class Trajectory:
    """One subject's record: ``K+1`` covariate blocks and ``K`` treatment codes."""

    l_blocks: tuple
    a_values: tuple

    def __post_init__(self):
        object.__setattr__(self, "l_blocks", tuple(np.atleast_1d(np.asarray(b, dtype=float)) for b in self.l_blocks))
        object.__setattr__(self, "a_values", tuple(int(a) for a in self.a_values))
        if len(self.l_blocks) != len(self.a_values) + 1:
            raise ContractError("need exactly K treatments and K+1 covariate blocks")

    def check(self, spec: ProblemSpec) -> None:
        if len(self.a_values) != spec.K:
            raise ContractError(f"record has {len(self.a_values)} treatments, spec has K={spec.K}")
        for k, (b, d) in enumerate(zip(self.l_blocks, spec.l_dims), start=1):
            if b.shape[0] != d:
                raise ContractError(f"block L{k} has dimension {b.shape[0]}, expected {d}")
        for k, (a, s) in enumerate(zip(self.a_values, spec.treatment_spaces), start=1):
            if a not in s:
                raise ContractError(f"A{k}={a} is not in its treatment space {s}")


class Dataset:
    """A batch of ``n`` records stored columnwise.

    Parameters
    ----------
    L : list of K+1 arrays of shape (n, d_k)
    A : (n, K) int array
    spec : ProblemSpec
    weights : (n,) array, optional
        Frequency weights.  Every empirical mean is weighted by them; the
        default is one per row.  Exhaustive enumerations of a discrete law
        weighted by path probabilities turn every estimator into its exact
        population limit.
    """

    def __init__(self, L: Sequence[np.ndarray], A: np.ndarray, spec: ProblemSpec,
                 weights: np.ndarray | None = None):
        A = np.asarray(A)
        if A.ndim == 1:
            A = A.reshape(-1, 1)
        L = [np.asarray(b, dtype=float).reshape(A.shape[0], -1) for b in L]
        n = A.shape[0]
        if n < 1:
            raise DatasetError("n >= 1 required")
        if len(L) != spec.K + 1 or A.shape[1] != spec.K:
            raise DatasetError("dataset shape does not match the problem horizon")
        for k, (b, d) in enumerate(zip(L, spec.l_dims), start=1):
            if b.shape[1] != d:
                raise DatasetError(f"block L{k} has {b.shape[1]} columns, expected {d}")
        for k in range(1, spec.K + 1):
            bad = ~np.isin(A[:, k - 1], spec.treatment_spaces[k - 1])
            if np.any(bad):
                row = int(np.flatnonzero(bad)[0])
                raise DatasetError(f"row {row}: A{k}={A[row, k - 1]} not in {spec.treatment_spaces[k - 1]}")
        self.L = [b for b in L]
        self.A = A.astype(int)
        self.spec = spec
        if weights is None:
            self.weights = np.ones(n)
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.shape[0] != n or np.any(w < 0) or w.sum() <= 0:
                raise DatasetError("weights must be nonnegative with a positive total")
            self.weights = w
        for b in self.L:
            b.setflags(write=False)
        self.A.setflags(write=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.spec.K

    def __len__(self) -> int:
        return self.n

    def mean(self, x: np.ndarray) -> float:
        """Weighted empirical mean ``P_n[x]``."""
        return float(np.dot(self.weights, x) / self.weights.sum())

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([b[idx] for b in self.L], self.A[idx], self.spec, self.weights[idx])

    def record(self, i: int) -> Trajectory:
        return Trajectory(tuple(b[i] for b in self.L), tuple(self.A[i]))

    @property
    def records(self) -> list[Trajectory]:
        return [self.record(i) for i in range(self.n)]

    @classmethod
    def from_records(cls, records: Sequence[Trajectory], spec: ProblemSpec) -> "Dataset":
        if len(records) == 0:
            raise DatasetError("n >= 1 required")
        for r in records:
            r.check(spec)
        L = [np.vstack([r.l_blocks[k] for r in records]) for k in range(spec.K + 1)]
        A = np.array([r.a_values for r in records], dtype=int)
        return cls(L, A, spec)

    def hist_L(self, k: int) -> list[np.ndarray]:
        """Blocks ``L_1..L_k``."""
        return self.L[:k]

    def hist_A(self, k: int) -> np.ndarray:
        """Treatments ``A_1..A_k`` as an (n, k) array."""
        return self.A[:, :k]


# ---------------------------------------------------------------------------
# regime products


def hstar_matrix(ds: Dataset, k: int) -> np.ndarray:
    """``h_k*(a | A_{k-1}, L_k)`` for all codes ``a``, shape (n, |A_k|)."""
    return ds.spec.hstar(k, ds.hist_L(k), ds.hist_A(k - 1))


def hstar_realized(ds: Dataset, k: int) -> np.ndarray:
    """``h_k*(A_k | A_{k-1}, L_k)`` at the observed treatment."""
    m = hstar_matrix(ds, k)
    col = ds.spec.code_index(k, ds.A[:, k - 1])
    return m[np.arange(ds.n), col]


def pi_star_batch(ds: Dataset, j: int, k: int) -> np.ndarray:
    """Running product of realized regime densities over timepoints ``j..k``."""
    K = ds.K
    if not (1 <= j <= K + 1 and 0 <= k <= K):
        raise ContractError(f"timepoints out of range: j={j}, k={k}, K={K}")
    out = np.ones(ds.n)
    for r in range(j, k + 1):
        out *= hstar_realized(ds, r)
    return out


def with_treatment(A: np.ndarray, k: int, a: int) -> np.ndarray:
    """Copy of ``A[:, :k]`` with column ``k`` replaced by code ``a``."""
    out = np.array(A[:, :k], copy=True)
    out[:, k - 1] = a
    return out


def y_batch(eta_k: HistoryFn, ds: Dataset, k: int, hstar: np.ndarray | None = None) -> np.ndarray:
    """``sum_a h_k*(a | .) eta_k(a, A_{k-1}, L_k)`` for every row."""
    if hstar is None:
        hstar = hstar_matrix(ds, k)
    out = np.zeros(ds.n)
    Lk = ds.hist_L(k)
    for j, a in enumerate(ds.spec.treatment_spaces[k - 1]):
        w = hstar[:, j]
        if not np.any(w != 0):
            continue
        val = np.asarray(eta_k(Lk, with_treatment(ds.A, k, a)), dtype=float)
        out += np.where(w != 0, w * val, 0.0)
    return out


def _single(traj: Trajectory, spec: ProblemSpec) -> Dataset:
    traj.check(spec)
    return Dataset([b.reshape(1, -1) for b in traj.l_blocks], np.array([traj.a_values]), spec)


def pi_star(traj: Trajectory, spec: ProblemSpec, j: int, k: int) -> float:
    """Product of regime densities ``h_r*(A_r | .)`` for ``r = j..k`` on one record.

    Returns 1 when ``j > k``.
    """
    if not (1 <= j and k <= spec.K and j <= k + 1 and k >= 0):
        raise ContractError(f"need 1 <= j <= k <= K, got j={j}, k={k}, K={spec.K}")
    if j > k:
        return 1.0
    return float(pi_star_batch(_single(traj, spec), j, k)[0])


def y_under_regime(eta_k: HistoryFn, traj: Trajectory, spec: ProblemSpec, k: int) -> float:
    """Regime average of ``eta_k`` over the treatment at ``k`` for one record."""
    if not (1 <= k <= spec.K):
        raise ContractError(f"timepoint {k} out of range")
    ds = _single(traj, spec)
    if k > 1 and pi_star_batch(ds, 1, k - 1)[0] <= 0:
        raise ContractError("record is not reachable under the regime before timepoint k")
    return float(y_batch(eta_k, ds, k)[0])


# ---------------------------------------------------------------------------
# CSV interface


def csv_header(spec: ProblemSpec) -> list[str]:
    cols = []
    for k in range(1, spec.K + 2):
        cols += [f"L{k}_{i}" for i in range(1, spec.l_dims[k - 1] + 1)]
        if k <= spec.K:
            cols.append(f"A{k}")
    return cols


def load_dataset(path, spec: ProblemSpec, sentinel: float = 0.0) -> Dataset:
    """Read a dataset CSV.

    Empty covariate cells (blocks after dropout) are filled with ``sentinel``;
    estimators never read them because the regime product gates those rows.
    """
    expected = csv_header(spec)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("n >= 1 required (empty file)") from None
        missing = [c for c in expected if c not in header]
        if missing:
            raise DatasetError(f"missing column(s): {', '.join(missing)}")
        pos = [header.index(c) for c in expected]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for c, p in zip(expected, pos):
                cell = row[p].strip() if p < len(row) else ""
                if c.startswith("A"):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DatasetError(f"row {lineno}, column {c}: not an integer code {cell!r}") from None
                    if not v.is_integer():
                        raise DatasetError(f"row {lineno}, column {c}: not an integer code {cell!r}")
                    k = int(c[1:])
                    if int(v) not in spec.treatment_spaces[k - 1]:
                        raise DatasetError(f"row {lineno}, column {c}: code {int(v)} not in {spec.treatment_spaces[k - 1]}")
                    vals.append(v)
                else:
                    if cell == "":
                        vals.append(sentinel)
                        continue
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DatasetError(f"row {lineno}, column {c}: not a number {cell!r}") from None
                    if not math.isfinite(v):
                        raise DatasetError(f"row {lineno}, column {c}: non-finite value")
                    vals.append(v)
            rows.append(vals)
    if not rows:
        raise DatasetError("n >= 1 required (no data rows)")
    M = np.array(rows, dtype=float)
    L, A, col = [], [], 0
    for k in range(1, spec.K + 2):
        d = spec.l_dims[k - 1]
        L.append(M[:, col:col + d])
        col += d
        if k <= spec.K:
            A.append(M[:, col].astype(int))
            col += 1
    return Dataset(L, np.column_stack(A), spec)


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset in the CSV layout read by :func:`load_dataset`."""
    header = csv_header(ds.spec)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = []
            for k in range(1, ds.K + 2):
                row += [repr(float(x)) for x in ds.L[k - 1][i]]
                if k <= ds.K:
                    row.append(str(int(ds.A[i, k - 1])))
            w.writerow(row)
