"""Parametric treatment models and the running products of fitted densities.

A :class:`PropensityFit` is a list of per-timepoint density functions
``(L_1..L_k, A_1..A_{k-1}) -> (n, |A_k|)`` plus bookkeeping.  Maximum
likelihood fits come from :func:`fit_propensities`; known densities (the
truth of a simulated law, or a machine-learning fit) can be wrapped with
:meth:`PropensityFit.from_functions`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .expr import Basis
from .glm import GlmFit, MultinomialFit, fit_glm, fit_multinomial
from .trajectory import ContractError, Dataset, ProblemSpec, Trajectory, _single, with_treatment

EPSILON = 1e-6
EXTREME_PROB = 1e-8

DensityFn = Callable[[Sequence[np.ndarray], np.ndarray], np.ndarray]


class PropensityFitError(RuntimeError):
    """A treatment-model fit failed (separation, non-convergence, too few rows)."""

    def __init__(self, k: int, message: str):
        super().__init__(f"treatment model at timepoint {k}: {message}")
        self.k = k


@dataclass
class PropensityModel:
    """Working models for the treatment densities.

    Parameters
    ----------
    bases : sequence of Basis
        ``r_k`` for ``k = 1..K``; may read ``L_1..L_k`` and ``A_1..A_{k-1}``.
    monotone : bool
        Dropout structure on binary ``{0, 1}`` treatments: once a subject
        has ``A = 0`` it stays 0, so ``h_k(1 | .) = 0`` unless every earlier
        treatment is 1.  The fit at ``k`` then uses only rows with all
        earlier treatments equal to 1.
    """

    bases: Sequence[Basis]
    monotone: bool = False

    def __post_init__(self):
        self.bases = [b if isinstance(b, Basis) else Basis(b) for b in self.bases]

    def check(self, spec: ProblemSpec) -> None:
        if len(self.bases) != spec.K:
            raise ContractError(f"need {spec.K} treatment bases, got {len(self.bases)}")
        for k, b in enumerate(self.bases, start=1):
            for e in b.exprs:
                if e.max_l_time > k or e.max_a_time > k - 1:
                    raise ContractError(f"treatment basis term {e.source!r} at k={k} reads the future")
        if self.monotone:
            for k, s in enumerate(spec.treatment_spaces, start=1):
                if sorted(s) != [0, 1]:
                    raise ContractError(f"monotone treatment models need A{k} in {{0, 1}}")

    def to_config(self) -> dict:
        return {"bases": [b.to_list() for b in self.bases], "monotone": self.monotone}

    @classmethod
    def from_config(cls, cfg: dict) -> "PropensityModel":
        return cls([Basis(t) for t in cfg["bases"]], bool(cfg.get("monotone", False)))


class PiHat(NamedTuple):
    value: float
    raw: float


@dataclass
class PropensityFit:
    """Fitted treatment densities.

    Attributes
    ----------
    spec : ProblemSpec
    densities : list of callables
        ``densities[k-1](L_1..L_k, A_1..A_{k-1})`` returns the (n, |A_k|)
        density matrix, columns ordered as the treatment space.
    fits : list
        Per-k :class:`GlmFit` / :class:`MultinomialFit`, or ``None`` when the
        densities were supplied directly.
    diagnostics : dict
        Per-k fit issues.
    epsilon : float
        Floor applied to each fitted density before it enters a division.
    """

    spec: ProblemSpec
    densities: list
    fits: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    epsilon: float = EPSILON

    def __post_init__(self):
        self.diagnostics.setdefault("issues", [])

    @classmethod
    def from_functions(cls, spec: ProblemSpec, densities: Sequence[DensityFn],
                       epsilon: float = EPSILON) -> "PropensityFit":
        if len(densities) != spec.K:
            raise ContractError(f"need {spec.K} density functions")
        return cls(spec, list(densities), [None] * spec.K, {}, epsilon)

    @property
    def K(self) -> int:
        return self.spec.K

    def probs(self, k: int, L: Sequence[np.ndarray], A_prev: np.ndarray) -> np.ndarray:
        """Density matrix of ``A_k`` given the history, shape (n, |A_k|)."""
        return np.asarray(self.densities[k - 1](list(L[:k]), A_prev[:, :k - 1]), dtype=float)

    def h_matrix(self, ds: Dataset, k: int) -> np.ndarray:
        return self.probs(k, ds.hist_L(k), ds.hist_A(k - 1))

    def h_realized(self, ds: Dataset, k: int) -> np.ndarray:
        """Raw ``h_k(A_k | .)`` at the observed treatment."""
        m = self.h_matrix(ds, k)
        return m[np.arange(ds.n), self.spec.code_index(k, ds.A[:, k - 1])]

    def h_at(self, ds: Dataset, k: int, a: int) -> np.ndarray:
        """Raw ``h_k(a | A_{k-1}, L_k)`` with the treatment at ``k`` set to ``a``."""
        m = self.h_matrix(ds, k)
        return m[:, self.spec.code_index(k, np.array([a]))[0]]

    def pi_hat(self, ds: Dataset, j: int, k: int, truncate: bool = True) -> np.ndarray:
        """Product of realized fitted densities over ``j..k`` (1 if ``j > k``).

        With ``truncate`` each factor is floored at ``epsilon`` before
        multiplying, so a product over ``j..k`` always equals the product of
        the pieces over ``j..m`` and ``m+1..k``.
        """
        if not (1 <= j <= self.K + 1 and 0 <= k <= self.K):
            raise ContractError(f"timepoints out of range: j={j}, k={k}")
        out = np.ones(ds.n)
        for r in range(j, k + 1):
            h = self.h_realized(ds, r)
            out *= self.floor(h) if truncate else h
        return out

    def pi_raw(self, ds: Dataset, j: int, k: int) -> np.ndarray:
        return self.pi_hat(ds, j, k, truncate=False)

    def floor(self, x: np.ndarray) -> np.ndarray:
        """Floor at ``epsilon``."""
        x = np.asarray(x, dtype=float)
        return np.where(x < self.epsilon, self.epsilon, x)

    def n_truncated(self, ds: Dataset) -> int:
        """Number of realized fitted densities below ``epsilon``."""
        return sum(int(np.count_nonzero(self.h_realized(ds, k) < self.epsilon))
                   for k in range(1, self.K + 1))


def pi_hat(fit: PropensityFit, traj: Trajectory, j: int, k: int) -> PiHat:
    """Fitted product over timepoints ``j..k`` on a single record.

    Returns the truncated value (factors floored at ``epsilon``) and the raw
    value; both are 1 when ``j > k``.
    """
    if not (1 <= j and k <= fit.K and j <= k + 1):
        raise ContractError(f"need 1 <= j <= k <= K, got j={j}, k={k}")
    ds = _single(traj, fit.spec)
    return PiHat(float(fit.pi_hat(ds, j, k)[0]), float(fit.pi_raw(ds, j, k)[0]))


def _at_risk(ds: Dataset, k: int) -> np.ndarray:
    if k == 1:
        return np.ones(ds.n, dtype=bool)
    return np.all(ds.A[:, :k - 1] == 1, axis=1)


def _glm_density(fit: GlmFit, basis: Basis, monotone: bool, space: tuple):
    one = space.index(1) if 1 in space else 1
    zero = 1 - one

    def fn(L, A_prev):
        p1 = fit.predict(basis.matrix(L, A_prev))
        if monotone and A_prev.shape[1] > 0:
            p1 = np.where(np.all(A_prev == 1, axis=1), p1, 0.0)
        out = np.empty((p1.shape[0], 2))
        out[:, one] = p1
        out[:, zero] = 1.0 - p1
        return out
    return fn


def _multinomial_density(fit: MultinomialFit, basis: Basis):
    def fn(L, A_prev):
        return fit.predict_proba(basis.matrix(L, A_prev))
    return fn


def fit_propensities(ds: Dataset, model: PropensityModel, errors: str = "raise",
                     epsilon: float = EPSILON) -> PropensityFit:
    """Maximum-likelihood fit of each treatment model.

    Binary treatments use logistic regression on ``r_k``; larger spaces use
    a baseline-category multinomial logit with the first code as reference.

    Parameters
    ----------
    ds : Dataset
    model : PropensityModel
    errors : {"raise", "warn"}
        Separation, non-convergence and undersized fits raise
        :class:`PropensityFitError` naming ``k``, or are recorded in
        ``diagnostics["issues"]``.
    epsilon : float

    Returns
    -------
    PropensityFit
    """
    spec = ds.spec
    model.check(spec)
    densities, fits, issues = [], [], []
    for k in range(1, spec.K + 1):
        basis = model.bases[k - 1]
        space = spec.treatment_spaces[k - 1]
        rows = _at_risk(ds, k) if model.monotone else np.ones(ds.n, dtype=bool)
        w = np.where(rows, ds.weights, 0.0)
        X = basis.matrix(ds.hist_L(k), ds.hist_A(k - 1))
        labels = spec.code_index(k, ds.A[:, k - 1])
        problems = []
        if int(np.count_nonzero(w)) < basis.dim + 1:
            problems.append(f"only {int(np.count_nonzero(w))} rows for {basis.dim} coefficients")
            raise PropensityFitError(k, problems[0])
        present = np.unique(labels[w > 0])
        if len(present) < len(space):
            problems.append("separation: some treatment levels never observed among fitting rows")
        if len(space) == 2:
            one = space.index(1) if 1 in space else 1
            fit = fit_glm(X, (labels == one).astype(float), w, link="logit", on_singular="ridge")
            p = fit.predict(X)[w > 0]
            density = _glm_density(fit, basis, model.monotone, space)
        else:
            fit = fit_multinomial(X, labels, len(space), w)
            p = fit.predict_proba(X)[w > 0]
            density = _multinomial_density(fit, basis)
        if fit.diagnostics.get("separated"):
            problems.append("separation: coefficients diverge")
        elif not fit.converged:
            problems.append("did not converge")
        if not any(pr.startswith("separation") for pr in problems):
            if np.min(p) < EXTREME_PROB or np.max(p) > 1 - EXTREME_PROB:
                problems.append("separation: fitted probabilities reach 0 or 1")
        for pr in problems:
            if errors == "raise":
                raise PropensityFitError(k, pr)
            issues.append({"k": k, "message": pr})
        densities.append(density)
        fits.append(fit)
    return PropensityFit(spec, densities, fits, {"issues": issues}, epsilon)


def counterfactual_history(ds: Dataset, k: int, a: int) -> tuple[list[np.ndarray], np.ndarray]:
    """History through ``A_k`` with ``A_k`` replaced by ``a``."""
    return ds.hist_L(k), with_treatment(ds.A, k, a)


def pi_of_history(fit: PropensityFit, L: Sequence[np.ndarray], A: np.ndarray, j: int, k: int,
                  truncate: bool = True) -> np.ndarray:
    """Product of fitted densities over ``j..k`` at arbitrary histories ``(L, A)``."""
    n = A.shape[0]
    out = np.ones(n)
    for r in range(j, k + 1):
        m = fit.probs(r, L, A[:, :r - 1])
        h = m[np.arange(n), fit.spec.code_index(r, A[:, r - 1])]
        out = out * (fit.floor(h) if truncate else h)
    return out
