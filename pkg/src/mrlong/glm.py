"""Canonical-link GLM fitting with observation weights and offsets.

The solver is Newton's method on the (quasi) log-likelihood, which for a
canonical link coincides with IRLS.  It starts at zero, halves the step
until the objective does not decrease, and stops when the sup-norm of the
weight-normalized score drops below ``tol``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit as _logit, log_expit

SEPARATION_NORM = 1e4
RIDGE_FALLBACK = 1e-8


class SingularDesignError(np.linalg.LinAlgError):
    """Weighted design is rank deficient and no ridge was requested."""


class LinkRangeError(ValueError):
    """Outcome outside the range of a bounded link under the strict policy."""


class Link:
    """A canonical link: mean ``Psi``, inverse ``Psi^{-1}``, variance ``Psi'``."""

    name = "identity"

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def linear(self, mu):
        return np.asarray(mu, dtype=float)

    def deriv(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def cumulant(self, eta):
        eta = np.asarray(eta, dtype=float)
        return 0.5 * eta ** 2

    def in_range(self, y) -> np.ndarray:
        return np.isfinite(y)

    def __repr__(self) -> str:
        return f"Link({self.name!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Link) and other.name == self.name

    def __hash__(self) -> int:
        return hash(self.name)


class IdentityLink(Link):
    name = "identity"


class LogitLink(Link):
    name = "logit"

    def mean(self, eta):
        return expit(eta)

    def linear(self, mu):
        return _logit(np.clip(mu, 1e-300, None))

    def deriv(self, eta):
        m = expit(eta)
        return m * (1.0 - m)

    def cumulant(self, eta):
        # log(1 + e^eta), stable for large |eta|
        return -log_expit(-np.asarray(eta, dtype=float))

    def in_range(self, y):
        return (y >= 0) & (y <= 1)


class LogLink(Link):
    name = "log"

    def mean(self, eta):
        return np.exp(eta)

    def linear(self, mu):
        return np.log(mu)

    def deriv(self, eta):
        return np.exp(eta)

    def cumulant(self, eta):
        return np.exp(eta)

    def in_range(self, y):
        return y >= 0


LINKS = {"identity": IdentityLink(), "logit": LogitLink(), "log": LogLink()}


def get_link(link) -> Link:
    if isinstance(link, Link):
        return link
    try:
        return LINKS[str(link)]
    except KeyError:
        raise ValueError(f"unknown link {link!r}; choose from {sorted(LINKS)}") from None


@dataclass
class GlmFit:
    """Result of :func:`fit_glm`.

    Attributes
    ----------
    coefficients : ndarray
    link : Link
    converged : bool
    iterations : int
    final_gradient_norm : float
        Sup-norm of the weight-normalized score at the returned coefficients.
    diagnostics : dict
        ``ridge`` actually used, ``separated`` flag and any messages.
    """

    coefficients: np.ndarray
    link: Link
    converged: bool
    iterations: int
    final_gradient_norm: float
    diagnostics: dict = field(default_factory=dict)

    def linear_predictor(self, X, offset=0.0):
        return np.asarray(X, dtype=float) @ self.coefficients + offset

    def predict(self, X, offset=0.0):
        return self.link.mean(self.linear_predictor(X, offset))


def score(X, y, weights, offset, coef, link, ridge=0.0) -> np.ndarray:
    """Weight-normalized score ``sum w x (y - Psi(x'b + o)) / sum w - ridge * b``."""
    link = get_link(link)
    X = np.asarray(X, dtype=float)
    w = np.asarray(weights, dtype=float)
    eta = X @ coef + offset
    resid = np.where(w > 0, y - link.mean(eta), 0.0)
    return X.T @ (w * resid) / w.sum() - ridge * coef


def _objective(X, y, w, offset, coef, link, ridge):
    eta = X @ coef + offset
    val = np.where(w > 0, y * eta - link.cumulant(eta), 0.0)
    return float(np.dot(w, val)) - 0.5 * ridge * float(coef @ coef)


def _rank_deficient(X, w) -> bool:
    rows = w > 0
    if rows.sum() < X.shape[1]:
        return True
    Z = X[rows] * np.sqrt(w[rows] / w[rows].max())[:, None]
    s = np.linalg.svd(Z, compute_uv=False)
    return bool(s[-1] <= s[0] * 1e-10 or s[0] == 0)


def fit_glm(X, y, weights=None, offset=None, link="identity", ridge: float = 0.0,
            tol: float = 1e-8, max_iter: int = 100, on_singular: str = "raise",
            range_policy: str = "quasi") -> GlmFit:
    """Fit a canonical-link GLM by Newton/IRLS.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) array
    weights : (n,) array, optional
        Nonnegative observation weights; zero-weight rows drop out.
    offset : (n,) array, optional
    link : {"identity", "logit", "log"} or Link
    ridge : float
        Penalty added to the normalized score as ``-ridge * coef``.
    tol : float
        Convergence threshold on the sup-norm of the normalized score.
    max_iter : int
    on_singular : {"raise", "ridge"}
        With a rank-deficient design and ``ridge == 0``: raise
        :class:`SingularDesignError`, or refit with ``ridge = 1e-8`` and
        record it in the diagnostics.
    range_policy : {"quasi", "strict"}
        What to do when ``y`` leaves the range of a bounded link: solve the
        score equation anyway, or raise :class:`LinkRangeError`.

    Returns
    -------
    GlmFit
    """
    link = get_link(link)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.ndim(y) == 1 and len(y) != 1:
        X = X.T
    n, p = X.shape
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    off = np.zeros(n) if offset is None else np.broadcast_to(np.asarray(offset, dtype=float), (n,)).copy()
    if y.shape[0] != n or w.shape[0] != n:
        raise ValueError("X, y and weights must have matching rows")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive entry")
    active = w > 0
    y = np.where(active, y, 0.0)
    X = np.where(active[:, None], X, 0.0)
    off = np.where(active, off, 0.0)
    if not np.all(np.isfinite(X[active])) or not np.all(np.isfinite(y[active])) or not np.all(np.isfinite(off[active])):
        raise ValueError("non-finite values in rows with positive weight")
    diagnostics: dict = {"ridge": ridge, "separated": False, "messages": []}
    out_of_range = active & ~link.in_range(y)
    if np.any(out_of_range):
        if range_policy == "strict":
            raise LinkRangeError(f"{int(out_of_range.sum())} outcome(s) outside the range of the {link.name} link")
        diagnostics["messages"].append(f"quasi-likelihood: {int(out_of_range.sum())} outcome(s) outside link range")
        diagnostics["out_of_range"] = int(out_of_range.sum())
    if ridge == 0.0 and _rank_deficient(X, w):
        if on_singular == "raise":
            raise SingularDesignError("weighted design is rank deficient; pass ridge > 0 or on_singular='ridge'")
        ridge = RIDGE_FALLBACK
        diagnostics["ridge"] = ridge
        diagnostics["messages"].append(f"rank-deficient design: ridge {RIDGE_FALLBACK:g} fallback")

    wn = w / w.sum()
    coef = np.zeros(p)
    obj = _objective(X, y, wn, off, coef, link, ridge)
    converged = False
    it = 0
    g = score(X, y, w, off, coef, link, ridge)
    gnorm = float(np.max(np.abs(g)))
    polish = 0
    while it < max_iter:
        if gnorm <= tol:
            converged = True
            # a few extra Newton steps drive the score to rounding level
            if polish >= 3:
                break
            polish += 1
        eta = X @ coef + off
        v = wn * link.deriv(eta)
        H = X.T @ (X * v[:, None]) + ridge * np.eye(p)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        improved = False
        for _ in range(60):
            cand = coef + t * step
            cand_obj = _objective(X, y, wn, off, cand, link, ridge)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-15 * max(1.0, abs(obj)):
                improved = True
                break
            t *= 0.5
        it += 1
        if not improved:
            diagnostics["messages"].append("line search failed")
            break
        cand_g = score(X, y, w, off, cand, link, ridge)
        cand_norm = float(np.max(np.abs(cand_g)))
        if converged and cand_norm >= gnorm:
            break
        coef, obj, g, gnorm = cand, cand_obj, cand_g, cand_norm
        if np.linalg.norm(coef) > SEPARATION_NORM:
            diagnostics["separated"] = True
            diagnostics["messages"].append("coefficient norm diverging: separation or no finite solution")
            converged = False
            break
    if not diagnostics["separated"] and _perfectly_separated(X, y, active, coef, off, link):
        # the normalized score vanishes along the divergent ray long before the norm cap
        diagnostics["separated"] = True
        diagnostics["messages"].append("fitted means reproduce every 0/1 outcome: separation")
        converged = False
    elif gnorm <= tol and not diagnostics["separated"]:
        converged = True
    return GlmFit(coef, link, converged, it, gnorm, diagnostics)


def _perfectly_separated(X, y, active, coef, offset, link, gap: float = 1e-6) -> bool:
    if link.name != "logit" or not np.all((y[active] == 0) | (y[active] == 1)):
        return False
    mu = link.mean(X[active] @ coef + offset[active])
    return bool(np.max(np.abs(y[active] - mu)) < gap)


def fit_scalar_extension(y, offset, z, weights=None, link="identity", range_policy: str = "quasi",
                         tol: float = 1e-8, return_fit: bool = False):
    """Fit the single coefficient of an offset model ``Psi(offset + lam * z)``.

    Parameters
    ----------
    y, offset, z : (n,) arrays
    weights : (n,) array, optional
    link : str or Link
    range_policy : {"quasi", "strict"}

    Returns
    -------
    float, or (float, GlmFit) when ``return_fit`` is set.
    """
    z = np.asarray(z, dtype=float).reshape(-1, 1)
    fit = fit_glm(z, y, weights, offset, link, tol=tol, on_singular="ridge", range_policy=range_policy)
    lam = float(fit.coefficients[0])
    return (lam, fit) if return_fit else lam


def predict(fit: GlmFit, s, offset=0.0):
    """``Psi(s' coef + offset)``; accepts one covariate vector or a matrix of rows."""
    s = np.asarray(s, dtype=float)
    return fit.link.mean(s @ fit.coefficients + offset)


# ---------------------------------------------------------------------------
# baseline-category multinomial logit


@dataclass
class MultinomialFit:
    """Baseline-category logit; column 0 of the class set is the reference.

    ``coefficients`` has shape ``(p, m - 1)``.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    diagnostics: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        eta = np.column_stack([np.zeros(X.shape[0]), X @ self.coefficients])
        eta -= eta.max(axis=1, keepdims=True)
        e = np.exp(eta)
        return e / e.sum(axis=1, keepdims=True)


def fit_multinomial(X, labels, n_classes: int, weights=None, tol: float = 1e-8,
                    max_iter: int = 100, on_singular: str = "ridge") -> MultinomialFit:
    """Weighted maximum likelihood for a baseline-category multinomial logit.

    Parameters
    ----------
    X : (n, p) array
    labels : (n,) int array of class indices in ``0..n_classes-1``
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    m = n_classes
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    active = w > 0
    X = np.where(active[:, None], X, 0.0)
    wn = w / w.sum()
    Y = np.zeros((n, m))
    Y[np.arange(n), labels] = 1.0
    ridge = 0.0
    diagnostics: dict = {"ridge": 0.0, "separated": False, "messages": []}
    if _rank_deficient(X, w):
        if on_singular == "raise":
            raise SingularDesignError("weighted design is rank deficient")
        ridge = RIDGE_FALLBACK
        diagnostics["ridge"] = ridge
        diagnostics["messages"].append(f"rank-deficient design: ridge {RIDGE_FALLBACK:g} fallback")
    q = m - 1
    B = np.zeros((p, q))

    def objective(B):
        P = MultinomialFit(B, False, 0, 0.0).predict_proba(X)
        return float(np.dot(wn, np.log(np.clip(P[np.arange(n), labels], 1e-300, None)))) - 0.5 * ridge * float(np.sum(B * B))

    def grad(B):
        P = MultinomialFit(B, False, 0, 0.0).predict_proba(X)
        G = X.T @ (wn[:, None] * (Y - P))[:, 1:] - ridge * B
        return G, P

    obj = objective(B)
    G, P = grad(B)
    gnorm = float(np.max(np.abs(G)))
    converged = gnorm <= tol
    it = 0
    polish = 0
    while it < max_iter:
        if gnorm <= tol:
            converged = True
            if polish >= 3:
                break
            polish += 1
        Pq = P[:, 1:]
        H = np.zeros((p * q, p * q))
        for a in range(q):
            for b in range(q):
                c = wn * Pq[:, a] * ((a == b) - Pq[:, b])
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = X.T @ (X * c[:, None])
        H += ridge * np.eye(p * q)
        g = G.T.reshape(-1)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        step = step.reshape(q, p).T
        t = 1.0
        ok = False
        for _ in range(60):
            cand = B + t * step
            co = objective(cand)
            if np.isfinite(co) and co >= obj - 1e-15 * max(1.0, abs(obj)):
                ok = True
                break
            t *= 0.5
        it += 1
        if not ok:
            diagnostics["messages"].append("line search failed")
            break
        cG, cP = grad(cand)
        cnorm = float(np.max(np.abs(cG)))
        if converged and cnorm >= gnorm:
            break
        B, obj, G, P, gnorm = cand, co, cG, cP, cnorm
        if np.linalg.norm(B) > SEPARATION_NORM:
            diagnostics["separated"] = True
            converged = False
            break
    if gnorm <= tol and not diagnostics["separated"]:
        converged = True
    return MultinomialFit(B, converged, it, gnorm, diagnostics)
