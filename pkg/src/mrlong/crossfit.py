"""Sample splitting, pluggable nuisance learners and the cross-fit estimators.

A learner turns training rows into two kinds of history functions:

* ``fit_conditional_mean(ds, outcome, k, weights)`` returns ``eta(L, A)``
  estimating ``E[outcome | L_1..L_k, A_1..A_k]``;
* ``fit_conditional_density(ds, k, weights)`` returns ``h(L, A_prev)``,
  an ``(n, |A_k|)`` matrix of treatment probabilities.

Every fitted function used by the cross-fit estimators is wrapped in a
:class:`Nuisance` that remembers its training rows, and a
:class:`LeakageLog` asserts that no function is evaluated on rows it was
fit on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.polynomial import legendre

from .discrete_law import DiscreteLaw, DriftBreakdown, NuisanceSet, drift_expected, true_nuisances
from .glm import fit_glm, fit_multinomial, get_link
from .ice import IceModelSet, fit_step
from .mr import QInputs, _realized_ratio
from .propensity import EPSILON, PropensityFit, pi_of_history
from .report import EstimateReport, EstimatorError
from .trajectory import ContractError, Dataset, ProblemSpec, pi_star_batch, y_batch

DEFAULT_U = 5
LINK_CLIP = 1e-6
ESTIMATORS = ("dr_cf", "dr_cf_bang", "dr_cf_reg", "mr_cf", "mr_cf_bang", "mr_cf_reg")


class LeakageError(AssertionError):
    """A nuisance function was evaluated on one of its own training rows."""


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    """Balanced random partition of ``0..n-1`` into ``U`` validation splits."""

    U: int
    assignment: np.ndarray
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.assignment)

    def rows(self, u: int) -> np.ndarray:
        """Validation rows of split ``u``."""
        return np.flatnonzero(self.assignment == u)

    def complement(self, u: int) -> np.ndarray:
        """Training rows of split ``u``."""
        return np.flatnonzero(self.assignment != u)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.U)


def _partition(n: int, U: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(n, dtype=int)
    out[rng.permutation(n)] = np.arange(n) % U
    return out


def make_splits(n: int, U: int, seed=0) -> SplitPlan:
    """Random partition into ``U`` splits whose sizes differ by at most one."""
    if U < 2:
        raise ValueError(f"need U >= 2 splits, got {U}")
    if n < U:
        raise ValueError(f"cannot split {n} rows into {U} nonempty splits")
    return SplitPlan(U, _partition(n, U, np.random.default_rng(seed)), seed)


class NestedSplitPlan:
    """Recursive partitions: each node's children partition its complement.

    The root is the full sample.  Node ``(u1,)`` is split ``u1`` of a
    ``sizes[0]``-way partition of all rows; its complement is every other
    row.  Node ``(u1, .., uk, u)`` is part ``u`` of a ``sizes[k]``-way
    partition of the complement of ``(u1, .., uk)``, and its own complement
    is the rest of that parent complement.  The first level coincides with
    :func:`make_splits` for the same seed.
    """

    def __init__(self, n: int, sizes: Sequence[int], seed: int = 0):
        if not sizes:
            raise ValueError("need at least one level")
        self.n = n
        self.sizes = [int(s) for s in sizes]
        self.seed = int(seed)
        self._rows: dict[tuple, np.ndarray] = {}
        self._comp: dict[tuple, np.ndarray] = {(): np.arange(n)}
        first = make_splits(n, self.sizes[0], self.seed)
        self._add((), first.assignment)
        for depth in range(1, len(self.sizes)):
            for path in self.paths(depth):
                parent = self._comp[path]
                if len(parent) < self.sizes[depth]:
                    raise ValueError(f"split {path} has {len(parent)} complement rows, "
                                     f"fewer than {self.sizes[depth]} parts")
                rng = np.random.default_rng([self.seed, *path])
                self._add(path, _partition(len(parent), self.sizes[depth], rng))

    def _add(self, path: tuple, assignment: np.ndarray) -> None:
        parent = self._comp[path]
        for u in range(self.sizes[len(path)]):
            self._rows[path + (u,)] = parent[assignment == u]
            self._comp[path + (u,)] = parent[assignment != u]

    @property
    def depth(self) -> int:
        return len(self.sizes)

    def paths(self, depth: int) -> list[tuple]:
        return list(product(*[range(s) for s in self.sizes[:depth]]))

    def rows(self, path: tuple) -> np.ndarray:
        return self._rows[tuple(path)]

    def complement(self, path: tuple) -> np.ndarray:
        return self._comp[tuple(path)]

    def summary(self) -> dict:
        return {",".join(map(str, p)): [len(self._rows[p]), len(self._comp[p])]
                for p in sorted(self._rows)}


# ---------------------------------------------------------------------------
# row bookkeeping


@dataclass
class Nuisance:
    """A fitted history function tagged with its training rows."""

    fn: Callable
    rows: np.ndarray
    label: str = ""

    def __call__(self, *args):
        return self.fn(*args)


def average_nuisances(parts: Sequence[Nuisance], label: str = "") -> Nuisance:
    """Equal-weight average of fitted functions; trained on the union of their rows."""
    parts = list(parts)
    if len(parts) == 1:
        return Nuisance(parts[0].fn, parts[0].rows, label or parts[0].label)

    def fn(*args):
        return sum(np.asarray(p(*args), dtype=float) for p in parts) / len(parts)
    rows = np.unique(np.concatenate([p.rows for p in parts]))
    return Nuisance(fn, rows, label)


@dataclass
class LeakageLog:
    """Counts out-of-sample evaluations and raises on the first overlap."""

    checks: int = 0

    def check(self, nuisances: Sequence[Nuisance], rows: np.ndarray, where: str) -> None:
        for nu in nuisances:
            if nu is None:
                continue
            overlap = np.intersect1d(nu.rows, rows, assume_unique=True)
            if overlap.size:
                raise LeakageError(f"{where}: {nu.label or 'nuisance'} evaluated on "
                                   f"{overlap.size} of its training rows")
            self.checks += 1


# ---------------------------------------------------------------------------
# learners


class Learner(Protocol):
    def fit_conditional_mean(self, ds: Dataset, outcome: np.ndarray, k: int,
                             weights: np.ndarray) -> Callable: ...

    def fit_conditional_density(self, ds: Dataset, k: int, weights: np.ndarray | None = None) -> Callable: ...


class OracleLearner:
    """Returns the true regressions and densities of a discrete law, ignoring the data."""

    def __init__(self, law: DiscreteLaw, spec: ProblemSpec):
        self.truth = true_nuisances(law, spec)

    def fit_conditional_mean(self, ds, outcome, k, weights):
        return self.truth.eta_dag[k - 1]

    def fit_conditional_density(self, ds, k, weights=None):
        return self.truth.h_dag[k - 1]


class ConstantLearner:
    """Constant regressions and uniform densities."""

    def __init__(self, value: float = 0.5):
        self.value = float(value)

    def fit_conditional_mean(self, ds, outcome, k, weights):
        value = self.value

        def fn(L, A):
            return np.full(A.shape[0], value)
        return fn

    def fit_conditional_density(self, ds, k, weights=None):
        m = len(ds.spec.treatment_spaces[k - 1])

        def fn(L, A_prev):
            return np.full((A_prev.shape[0], m), 1.0 / m)
        return fn


FAMILIES = ("polynomial", "histogram", "spline")


@dataclass(frozen=True)
class SeriesLearnerConfig:
    """Series regression settings.

    Parameters
    ----------
    family : {"polynomial", "histogram", "spline"}
        Per covariate: Legendre polynomials of degree ``m``, ``m``
        quantile bins, or piecewise-linear functions with ``m`` quantile
        knots.  Covariates enter additively; the treatment history enters
        through separate fits per observed treatment cell.
    sizes : sequence of int
        Candidate ``m`` values, chosen by V-fold cross-validation.
    folds : int
    seed : int
        Seeds the fold assignment.
    """

    family: str = "polynomial"
    sizes: tuple = (1, 2, 3)
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown basis family {self.family!r}; choose from {FAMILIES}")
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ContractError("candidate size grid is empty")
        if min(sizes) < (0 if self.family == "spline" else 1):
            raise ContractError(f"basis sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", tuple(sorted(set(sizes))))
        if self.folds < 2:
            raise ContractError(f"need at least 2 folds, got {self.folds}")

    def to_config(self) -> dict:
        return {"family": self.family, "sizes": list(self.sizes), "folds": self.folds, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "SeriesLearnerConfig":
        return cls(cfg.get("family", "polynomial"), tuple(cfg.get("sizes", (1, 2, 3))),
                   int(cfg.get("folds", 5)), int(cfg.get("seed", 0)))


def _covariates(L: Sequence[np.ndarray], k: int) -> np.ndarray:
    n = len(L[0])
    return np.column_stack([np.asarray(b, dtype=float).reshape(n, -1) for b in L[:k]])


class SeriesBasis:
    """Additive basis in the covariate history; knots and scaling come from training rows."""

    def __init__(self, family: str, m: int, X: np.ndarray):
        self.family = family
        self.m = m
        self.lo = X.min(axis=0)
        span = X.max(axis=0) - self.lo
        self.span = np.where(span > 0, span, 1.0)
        self.cuts = []
        if family == "histogram":
            q = np.linspace(0, 1, m + 1)[1:-1]
            self.cuts = [np.unique(np.quantile(X[:, j], q)) if m > 1 else np.empty(0) for j in range(X.shape[1])]
        elif family == "spline":
            q = np.linspace(0, 1, m + 2)[1:-1]
            self.cuts = [np.unique((np.quantile(X[:, j], q) - self.lo[j]) / self.span[j]) if m else np.empty(0)
                         for j in range(X.shape[1])]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        z = (X - self.lo) / self.span
        cols = [np.ones((X.shape[0], 1))]
        for j in range(X.shape[1]):
            if self.family == "polynomial":
                cols.append(legendre.legvander(2 * z[:, j] - 1, self.m)[:, 1:])
            elif self.family == "histogram":
                b = np.searchsorted(self.cuts[j], X[:, j], side="right")
                cols.append((b[:, None] == np.arange(1, len(self.cuts[j]) + 1)[None, :]).astype(float))
            else:
                cols.append(z[:, j:j + 1])
                cols.append(np.maximum(z[:, j:j + 1] - self.cuts[j][None, :], 0.0))
        return np.hstack(cols)


def _cells(A: np.ndarray) -> list[tuple]:
    if A.shape[1] == 0:
        return [()]
    return [tuple(r) for r in np.unique(A, axis=0)]


def _cell_mask(A: np.ndarray, cell: tuple) -> np.ndarray:
    if not cell:
        return np.ones(A.shape[0], dtype=bool)
    return np.all(A == np.asarray(cell)[None, :], axis=1)


def _wls(D: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, bool]:
    s = np.sqrt(w)
    coef, _, rank, _ = np.linalg.lstsq(D * s[:, None], y * s, rcond=None)
    return coef, rank < D.shape[1]


class SeriesMean:
    """Cellwise least-squares fit; cells never seen in training use the pooled fit."""

    def __init__(self, k: int, basis: SeriesBasis, coefs: dict, pooled: np.ndarray, flags: list):
        self.k = k
        self.basis = basis
        self.coefs = coefs
        self.pooled = pooled
        self.flags = flags

    def __call__(self, L, A) -> np.ndarray:
        D = self.basis(_covariates(L, self.k))
        keys = np.asarray(A)[:, :self.k]
        out = D @ self.pooled
        for cell, coef in self.coefs.items():
            m = _cell_mask(keys, cell)
            out[m] = D[m] @ coef
        return out

    def unseen(self, A) -> np.ndarray:
        keys = np.asarray(A)[:, :self.k]
        seen = np.zeros(keys.shape[0], dtype=bool)
        for cell in self.coefs:
            seen |= _cell_mask(keys, cell)
        return ~seen


class SeriesDensity:
    """Cellwise logistic (or multinomial) series fit of a treatment density."""

    def __init__(self, k: int, basis: SeriesBasis, n_classes: int, models: dict, pooled, flags: list):
        self.k = k
        self.basis = basis
        self.n_classes = n_classes
        self.models = models
        self.pooled = pooled
        self.flags = flags

    @staticmethod
    def _apply(model, D: np.ndarray) -> np.ndarray:
        kind, obj = model
        if kind == "const":
            return np.broadcast_to(obj, (D.shape[0], len(obj))).copy()
        if kind == "logit":
            p1 = obj.predict(D)
            return np.column_stack([1.0 - p1, p1])
        return obj.predict_proba(D)

    def __call__(self, L, A_prev) -> np.ndarray:
        D = self.basis(_covariates(L, self.k))
        keys = np.asarray(A_prev)[:, :self.k - 1]
        out = self._apply(self.pooled, D)
        for cell, model in self.models.items():
            m = _cell_mask(keys, cell)
            if np.any(m):
                out[m] = self._apply(model, D[m])
        return out


def _density_model(D: np.ndarray, labels: np.ndarray, w: np.ndarray, n_classes: int):
    present = np.unique(labels[w > 0])
    if len(present) == 1:
        p = np.zeros(n_classes)
        p[present[0]] = 1.0
        return ("const", p)
    if n_classes == 2:
        return ("logit", fit_glm(D, (labels == 1).astype(float), w, link="logit", on_singular="ridge"))
    return ("multinomial", fit_multinomial(D, labels, n_classes, w))


class SeriesLearner:
    """Least-squares / logistic series learner with V-fold choice of the basis size."""

    def __init__(self, config: SeriesLearnerConfig):
        self.config = config

    def _folds(self, n_active: int) -> np.ndarray:
        rng = np.random.default_rng(self.config.seed)
        return rng.permutation(n_active) % self.config.folds

    def _select(self, X: np.ndarray, w: np.ndarray, fit, loss) -> tuple[int, list, dict]:
        """Pick ``m`` minimizing the cross-validated loss; ties go to the smaller ``m``."""
        active = np.flatnonzero(w > 0)
        folds = self._folds(len(active))
        flags, losses = [], {}
        for m in self.config.sizes:
            basis = SeriesBasis(self.config.family, m, X[active])
            D = basis(X)
            if D.shape[1] > len(active):
                flags.append(f"size {m} skipped: {D.shape[1]} columns for {len(active)} rows")
                continue
            total, singular = 0.0, True
            for v in range(self.config.folds):
                tr = active[folds != v]
                te = active[folds == v]
                model, sing = fit(D, tr, False)
                singular &= sing
                total += loss(model, D, te, tr)
            if singular:
                flags.append(f"size {m} skipped: singular in every fold")
                continue
            losses[m] = total / w[active].sum()
        if not losses:
            raise EstimatorError("series learner", "every candidate basis size was skipped; " + "; ".join(flags))
        best = min(losses.values())
        tol = 1e-12 * max(1.0, abs(best))
        chosen = min(m for m, v in losses.items() if v <= best + tol)
        return chosen, flags, losses

    def fit_conditional_mean(self, ds: Dataset, outcome: np.ndarray, k: int, weights: np.ndarray) -> SeriesMean:
        X = _covariates(ds.hist_L(k), k)
        keys = ds.hist_A(k)
        w = np.asarray(weights, dtype=float)
        y = np.where(w > 0, np.asarray(outcome, dtype=float), 0.0)
        active = w > 0
        if not np.any(active):
            raise EstimatorError(f"timepoint {k}", "no rows with positive weight for the regression")
        cells = _cells(keys[active])

        def fit(D, rows, pooled=True):
            coefs, sing = {}, False
            for cell in cells:
                r = rows[_cell_mask(keys[rows], cell)]
                if len(r):
                    coefs[cell], s = _wls(D[r], y[r], w[r])
                    sing |= s
            return (coefs, _wls(D[rows], y[rows], w[rows])[0] if pooled else None), sing

        def loss(model, D, te, tr):
            coefs, _ = model
            pred = np.zeros(len(te))
            seen = np.zeros(len(te), dtype=bool)
            for cell in coefs:
                seen |= _cell_mask(keys[te], cell)
            if not np.all(seen):
                pred = D[te] @ _wls(D[tr], y[tr], w[tr])[0]
            for cell, c in coefs.items():
                m = _cell_mask(keys[te], cell)
                pred[m] = D[te][m] @ c
            return float(np.sum(w[te] * (y[te] - pred) ** 2))

        m, flags, losses = self._select(X, w, fit, loss)
        basis = SeriesBasis(self.config.family, m, X[active])
        (coefs, pooled), sing = fit(basis(X), np.flatnonzero(active))
        if sing:
            flags.append(f"size {m}: rank-deficient cell fit, minimum-norm solution used")
        out = SeriesMean(k, basis, coefs, pooled, flags)
        out.cv_losses = losses
        return out

    def fit_conditional_density(self, ds: Dataset, k: int, weights: np.ndarray | None = None) -> SeriesDensity:
        X = _covariates(ds.hist_L(k), k)
        keys = ds.hist_A(k - 1)
        space = ds.spec.treatment_spaces[k - 1]
        labels = ds.spec.code_index(k, ds.A[:, k - 1])
        w = ds.weights if weights is None else np.asarray(weights, dtype=float)
        active = w > 0
        cells = _cells(keys[active])
        nc = len(space)

        def fit(D, rows, pooled=True):
            models = {}
            for cell in cells:
                r = rows[_cell_mask(keys[rows], cell)]
                if len(r):
                    models[cell] = _density_model(D[r], labels[r], w[r], nc)
            return (models, _density_model(D[rows], labels[rows], w[rows], nc) if pooled else None), False

        def loss(model, D, te, tr):
            models, _ = model
            seen = np.zeros(len(te), dtype=bool)
            for cell in models:
                seen |= _cell_mask(keys[te], cell)
            P = np.zeros((len(te), nc))
            if not np.all(seen):
                P = SeriesDensity._apply(_density_model(D[tr], labels[tr], w[tr], nc), D[te])
            for cell, mod in models.items():
                m = _cell_mask(keys[te], cell)
                if np.any(m):
                    P[m] = SeriesDensity._apply(mod, D[te][m])
            p = P[np.arange(len(te)), labels[te]]
            return float(-np.sum(w[te] * np.log(np.maximum(p, 1e-12))))

        m, flags, losses = self._select(X, w, fit, loss)
        basis = SeriesBasis(self.config.family, m, X[active])
        (models, pooled), _ = fit(basis(X), np.flatnonzero(active))
        out = SeriesDensity(k, basis, nc, models, pooled, flags)
        out.cv_losses = losses
        return out


def series_learner(config: SeriesLearnerConfig | None = None) -> SeriesLearner:
    return SeriesLearner(config or SeriesLearnerConfig())


# ---------------------------------------------------------------------------
# Algorithm pieces shared by the cross-fit estimators


def _linear(link, mu: np.ndarray) -> np.ndarray:
    """``Psi^{-1}`` with fitted means pulled inside the link's range first."""
    link = get_link(link)
    if link.name == "logit":
        mu = np.clip(mu, LINK_CLIP, 1 - LINK_CLIP)
    elif link.name == "log":
        mu = np.maximum(mu, LINK_CLIP)
    return link.linear(mu)


class ExtendedEta:
    """``Psi(Psi^{-1}[base] + coef * z)`` with ``z`` a history covariate."""

    def __init__(self, base: Callable, coef: float, covariate: Callable, link):
        self.base = base
        self.coef = float(coef)
        self.covariate = covariate
        self.link = get_link(link)

    def __call__(self, L, A) -> np.ndarray:
        off = _linear(self.link, np.asarray(self.base(L, A), dtype=float))
        return self.link.mean(off + self.coef * self.covariate(L, A))


def _regime_weights(ds: Dataset, k: int) -> np.ndarray:
    return ds.weights * pi_star_batch(ds, 1, k)


def _ones(L, A):
    return np.ones(A.shape[0])


def _validation_extension(dv: Dataset, pf: PropensityFit, etas: Sequence, link, kind: str,
                          label: str) -> tuple[np.ndarray, list, list, list, list]:
    """Backward scalar-extension fits on a validation split.

    ``kind="bang"`` fits ``lambda_k`` on the covariate ``1/pi_hat^k`` with
    weights ``pi*^k``; ``kind="reg"`` fits an intercept ``beta_k`` with
    weights ``pi*^k / pi_hat^k``.  Both use the offset ``Psi^{-1}[eta_k]``.
    Returns ``Y_1``, the extended functions, step records, coefficients and
    degenerate-fit flags.
    """
    K = dv.K
    Y = dv.spec.psi(dv.L)
    ext, steps, coefs, flags = [None] * K, [], [0.0] * K, []
    for k in range(K, 0, -1):
        base = etas[k - 1]
        if kind == "bang":
            def cov(L, A, k=k):
                return 1.0 / pi_of_history(pf, L, A, 1, k)
            w = _regime_weights(dv, k)
        else:
            cov = _ones
            w = _regime_weights(dv, k) / pf.pi_hat(dv, 1, k)
        where = f"{label} timepoint {k}"
        coef = 0.0
        if not np.any(w > 0):
            flags.append({"where": where, "reason": "no regime-compatible validation rows; coefficient set to 0"})
        else:
            L, A = dv.hist_L(k), dv.hist_A(k)
            off = _linear(link, np.asarray(base(L, A), dtype=float))
            z = np.asarray(cov(L, A), dtype=float)[:, None]
            try:
                rec = fit_step(where, z, Y, w, link, off, on_singular="ridge")
            except EstimatorError as exc:
                flags.append({"where": where, "reason": f"{exc}; coefficient set to 0"})
            else:
                coef = float(rec.fit.coefficients[0])
                steps.insert(0, rec)
        coefs[k - 1] = coef
        ext[k - 1] = ExtendedEta(base, coef, cov, link)
        Y = y_batch(ext[k - 1], dv, k)
    return Y, ext, steps, coefs, flags


def _fit_densities(learner_h: Learner, dt: Dataset, rows: np.ndarray, ks: Sequence[int]) -> dict:
    return {k: Nuisance(learner_h.fit_conditional_density(dt, k, dt.weights), rows, f"h{k}") for k in ks}


def _link_of(link) -> str:
    return link.link if isinstance(link, IceModelSet) else str(link)


def _split_report(name: str, values: list, diagnostics: dict, config: dict, seed, details: dict) -> EstimateReport:
    vals = [float(v) for v in values]
    return EstimateReport(name, float(np.mean(vals)), per_split=vals, diagnostics=diagnostics,
                          config=config, seed=seed, details=details)


def algorithm6(ds: Dataset, spec: ProblemSpec, learner_eta: Learner, learner_h: Learner,
               link="identity", U: int = DEFAULT_U, seed=0, plan: SplitPlan | None = None,
               epsilon: float = EPSILON, extensions: bool = True) -> dict[str, EstimateReport]:
    """Six cross-fit estimators with machine-learned nuisances.

    For each split ``u`` the learners are trained on the other splits:
    propensities ``h_hat``, iterated regressions ``eta_hat`` (each
    regressing the previous fitted regime average) and ``eta_tilde`` (each
    regressing the running ``Q``).  On split ``u`` itself the estimators
    are the averages of

    * ``dr_cf``: ``Q_1(h_hat, eta_hat)``;
    * ``mr_cf``: ``Q_1(h_hat, eta_tilde)``;
    * ``*_bang``: the fitted regime average after refitting each
      regression with offset ``Psi^{-1}[eta]`` and covariate ``1/pi_hat^k``;
    * ``*_reg``: the same with an intercept and weights ``pi*^k / pi_hat^k``.

    Each estimate is the plain mean of the split values.

    Parameters
    ----------
    link : str or IceModelSet
        Link of the validation refits (the model set's link when given).
    U : int
        Number of splits, at least 2.
    plan : SplitPlan, optional
        Overrides ``U`` and ``seed``.
    extensions : bool
        Set False to skip the validation refits and return only ``dr_cf``
        and ``mr_cf``.

    Returns
    -------
    dict mapping estimator name to :class:`EstimateReport`
    """
    if ds.spec is not spec:
        ds = Dataset(ds.L, ds.A, spec, ds.weights)
    link = _link_of(link)
    get_link(link)
    plan = plan or make_splits(ds.n, U, seed)
    K = spec.K
    log = LeakageLog()
    values = {name: [] for name in ESTIMATORS}
    coef_trails = {name: [] for name in ESTIMATORS if name.endswith(("bang", "reg"))}
    flags: list = []
    steps: dict = {name: [] for name in coef_trails}
    per_split = []
    truncated = 0
    for u in range(plan.U):
        tr, va = plan.complement(u), plan.rows(u)
        dt, dv = ds.subset(tr), ds.subset(va)
        try:
            h = _fit_densities(learner_h, dt, tr, range(1, K + 1))
            h_list = [h[k] for k in range(1, K + 1)]
            eta_hat, eta_tilde = [None] * K, [None] * K
            Y = spec.psi(dt.L)
            Q = Y
            for k in range(K, 0, -1):
                w = _regime_weights(dt, k)
                f = learner_eta.fit_conditional_mean(dt, Y, k, w)
                eta_hat[k - 1] = Nuisance(f, tr, f"eta_hat{k}")
                Y = y_batch(f, dt, k)
                g = learner_eta.fit_conditional_mean(dt, Q, k, w)
                eta_tilde[k - 1] = Nuisance(g, tr, f"eta_tilde{k}")
                r = _realized_ratio(dt, h[k], k, True, epsilon)
                Q = r * (Q - g(dt.hist_L(k), dt.hist_A(k))) + y_batch(g, dt, k)
        except EstimatorError as exc:
            raise EstimatorError(f"split {u}: {exc.where}", str(exc).split(": ", 1)[-1]) from exc
        except Exception as exc:
            raise EstimatorError(f"split {u}", f"learner failed: {exc}") from exc
        log.check(h_list + eta_hat + eta_tilde, va, f"split {u}")
        pf = PropensityFit.from_functions(spec, h_list, epsilon)
        truncated += pf.n_truncated(dv)
        split_detail = {"rows": va, "h": h_list, "eta_hat": eta_hat, "eta_tilde": eta_tilde, "pf": pf}
        for flavor, etas in (("dr", eta_hat), ("mr", eta_tilde)):
            q = QInputs(dv, h_list, etas, 1, True, epsilon).recursive(1)
            values[f"{flavor}_cf"].append(dv.mean(q))
            for kind in ("bang", "reg") if extensions else ():
                name = f"{flavor}_cf_{kind}"
                Y1, ext, recs, coefs, fl = _validation_extension(dv, pf, etas, link, kind, f"split {u} {name}")
                values[name].append(dv.mean(Y1))
                coef_trails[name].append(coefs)
                steps[name].append(recs)
                flags.extend(fl)
                split_detail[f"{name}_eta"] = ext
        per_split.append(split_detail)
    base_diag = {"leakage_checks": log.checks, "leakage_violations": 0, "truncated": truncated,
                 "split_sizes": plan.sizes().tolist()}
    cfg = {"U": plan.U, "link": link, "epsilon": epsilon}
    out = {}
    for name in ESTIMATORS if extensions else ("dr_cf", "mr_cf"):
        diag = dict(base_diag)
        details = {"splits": per_split, "plan": plan}
        if name in coef_trails:
            key = "lambda" if name.endswith("bang") else "beta"
            diag[key] = coef_trails[name]
            diag["degenerate_fits"] = [f for f in flags if name in f["where"]]
            scores = [float(np.max(np.abs(r.score()))) for recs in steps[name] for r in recs]
            diag["max_abs_score"] = max(scores) if scores else 0.0
            details["steps"] = steps[name]
        out[name] = _split_report(name, values[name], diag, cfg, plan.seed, details)
    return out


def split_nuisances(reports: dict, flavor: str = "MR") -> list[NuisanceSet]:
    """Per-split ``(h_hat, eta)`` pairs of an :func:`algorithm6` run as nuisance sets."""
    key = {"DR": "eta_hat", "MR": "eta_tilde"}[flavor]
    splits = next(iter(reports.values())).details["splits"]
    return [NuisanceSet([f.fn for f in s["h"]], [f.fn for f in s[key]], label=f"split {u}")
            for u, s in enumerate(splits)]


# ---------------------------------------------------------------------------
# appendix variants


def two_layer(ds: Dataset, spec: ProblemSpec, learner_eta: Learner, learner_h: Learner,
              U: int = DEFAULT_U, seed: int = 0, epsilon: float = EPSILON) -> EstimateReport:
    """Two-layer cross-fit ``Q_1`` estimator.

    The sample is split into ``U`` parts; the complement of each part
    ``u1`` is split again into ``K`` parts ``S_{u1,1..K}``.  Working
    backwards, ``h_k`` and ``eta_k`` (regressing ``Q_{k+1}``) are fit on
    ``S_{u1,k}`` and ``Q_k`` is evaluated on ``S_{u1,k-1}``, where
    ``S_{u1,0}`` is part ``u1``.  The estimate averages the part means of
    ``Q_1``.
    """
    if ds.spec is not spec:
        ds = Dataset(ds.L, ds.A, spec, ds.weights)
    K = spec.K
    tree = NestedSplitPlan(ds.n, [U, K], seed)
    log = LeakageLog()
    values, fits = [], []
    for u1 in range(U):
        parts = {0: tree.rows((u1,))}
        for k in range(1, K + 1):
            parts[k] = tree.rows((u1, k - 1))
        h, eta = [None] * K, [None] * K
        outcome = None
        for k in range(K, 0, -1):
            rows = parts[k]
            dfit = ds.subset(rows)
            if outcome is None:
                outcome = spec.psi(dfit.L)
            try:
                h[k - 1] = Nuisance(learner_h.fit_conditional_density(dfit, k, dfit.weights), rows, f"h{k}")
                eta[k - 1] = Nuisance(learner_eta.fit_conditional_mean(dfit, outcome, k, _regime_weights(dfit, k)),
                                      rows, f"eta{k}")
            except Exception as exc:
                raise EstimatorError(f"split {u1} part {k}", f"learner failed: {exc}") from exc
            ev = parts[k - 1]
            dev = ds.subset(ev)
            log.check(h[k - 1:] + eta[k - 1:], ev, f"split {u1} part {k - 1}")
            outcome = QInputs(dev, h, eta, k, True, epsilon).recursive(k)
            fits.append({"split": u1, "k": k, "fit_rows": len(rows), "eval_rows": len(ev)})
        values.append(ds.subset(parts[0]).mean(outcome))
    diag = {"leakage_checks": log.checks, "leakage_violations": 0, "fits": fits, "tree": tree.summary()}
    return _split_report("mr_two_layer", values, diag, {"U": U, "epsilon": epsilon}, seed, {"tree": tree})


def multi_layer(ds: Dataset, spec: ProblemSpec, learner_eta: Learner, learner_h: Learner,
                U: int = DEFAULT_U, seed: int = 0, epsilon: float = EPSILON,
                max_K: int = 3, max_U: int = 5) -> EstimateReport:
    """Multi-layer cross-fit ``Q_1`` estimator with ``U``-way splits at every layer.

    Node ``p = (u1, .., uk)`` of the split tree has rows ``S_p`` and
    complement ``S_p^c``.  At each leaf (depth ``K``) ``h_K`` and
    ``eta_K`` are fit on the leaf complement.  Going up from depth ``K`` to
    1, node ``p`` at depth ``k`` evaluates ``Q_k`` on ``S_p`` using, for
    each ``r >= k``, the average of the timepoint-``r`` fits over all of
    ``p``'s descendants; then, if ``k >= 2``, fits ``h_{k-1}`` and
    ``eta_{k-1}`` (regressing ``Q_k``) on ``S_p``.  The estimate averages
    the depth-1 means of ``Q_1``.

    The tree has ``U**K`` leaves, so ``K`` and ``U`` are capped.
    """
    if ds.spec is not spec:
        ds = Dataset(ds.L, ds.A, spec, ds.weights)
    K = spec.K
    if K > max_K or U > max_U:
        raise ValueError(f"multi-layer split tree with U={U}, K={K} has {U ** K} leaves; "
                         f"caps are K <= {max_K} and U <= {max_U}")
    tree = NestedSplitPlan(ds.n, [U] * K, seed)
    log = LeakageLog()
    fit_h: dict[tuple, Nuisance] = {}
    fit_eta: dict[tuple, Nuisance] = {}

    def learn(path, rows, k, outcome):
        d = ds.subset(rows)
        y = spec.psi(d.L) if outcome is None else outcome
        try:
            fit_h[path] = Nuisance(learner_h.fit_conditional_density(d, k, d.weights), rows, f"h{k}@{path}")
            fit_eta[path] = Nuisance(learner_eta.fit_conditional_mean(d, y, k, _regime_weights(d, k)),
                                     rows, f"eta{k}@{path}")
        except Exception as exc:
            raise EstimatorError(f"node {path}", f"learner failed: {exc}") from exc

    # timepoint K fits live at the leaves (trained on leaf complements); a fit
    # of timepoint r < K lives at a depth r+1 node (trained on its own rows)
    for leaf in tree.paths(K):
        learn(leaf, tree.complement(leaf), K, None)

    cache: dict = {}

    def averaged(path: tuple, r: int, which: str) -> Nuisance:
        key = (path, r, which)
        if key not in cache:
            home = K if r == K else r + 1
            store = fit_h if which == "h" else fit_eta
            if len(path) == home:
                cache[key] = store[path]
            else:
                kids = [averaged(path + (u,), r, which) for u in range(U)]
                cache[key] = average_nuisances(kids, f"{which}{r}@{path}")
        return cache[key]

    values = []
    for k in range(K, 0, -1):
        for path in tree.paths(k):
            rows = tree.rows(path)
            d = ds.subset(rows)
            h = [None] * K
            eta = [None] * K
            for r in range(k, K + 1):
                h[r - 1] = averaged(path, r, "h")
                eta[r - 1] = averaged(path, r, "eta")
            log.check(h[k - 1:] + eta[k - 1:], rows, f"node {path}")
            Q = QInputs(d, h, eta, k, True, epsilon).recursive(k)
            if k == 1:
                values.append(d.mean(Q))
            else:
                learn(path, rows, k - 1, Q)
    diag = {"leakage_checks": log.checks, "leakage_violations": 0, "tree": tree.summary()}
    details = {"tree": tree, "averaged": averaged}
    return _split_report("mr_multi_layer", values, diag, {"U": U, "epsilon": epsilon}, seed, details)


# ---------------------------------------------------------------------------
# drift


@dataclass
class DriftTable:
    """Per-split drift breakdowns and their split average."""

    flavor: str
    per_split: list
    terms: dict = field(default_factory=dict)
    total: float = 0.0

    def rows(self) -> list[dict]:
        out = []
        for u, b in enumerate(self.per_split):
            for key, v in b.terms.items():
                out.append({"split": u, "term": key, "value": v})
        for key, v in self.terms.items():
            out.append({"split": "mean", "term": key, "value": v})
        return out


def drift_diagnostic(law: DiscreteLaw, spec: ProblemSpec, nuisance_sets: Sequence[NuisanceSet],
                     flavor: str = "MR") -> DriftTable:
    """Exact per-term drift of each split's plugged-in nuisances under ``law``.

    ``MR`` tables have ``K`` terms; ``DR`` tables have ``K + K(K-1)/2``.
    """
    breakdowns: list[DriftBreakdown] = [drift_expected(law, spec, ns, flavor) for ns in nuisance_sets]
    if not breakdowns:
        raise ValueError("no nuisance sets given")
    keys = list(breakdowns[0].terms)
    terms = {k: float(np.mean([b.terms[k] for b in breakdowns])) for k in keys}
    return DriftTable(flavor, breakdowns, terms, float(np.mean([b.total for b in breakdowns])))
