"""Iterated conditional expectation estimators and their K+1-robust extensions.

Every estimator here runs the same backward loop: at timepoint ``k`` fit a
regression of the current pseudo-outcome on the history through ``A_k``
among regime-compatible rows (zero weight elsewhere), then average the fit
over the regime's treatment density to get the next pseudo-outcome.  They
differ in the fitting weights and in whether an inverse-propensity
covariate is added to the regression.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .expr import Basis
from .glm import GlmFit, LinkRangeError, SingularDesignError, fit_glm, get_link, score
from .propensity import PropensityFit, pi_of_history
from .report import EstimateReport, EstimatorError
from .trajectory import ContractError, Dataset, ProblemSpec, pi_star_batch, y_batch


@dataclass
class IceModelSet:
    """Outcome regression working models ``eta_k = Psi(tau_k' s_k)``.

    Parameters
    ----------
    bases : sequence of Basis
        ``s_k`` for ``k = 1..K``; may read ``L_1..L_k`` and ``A_1..A_k``.
    link : {"identity", "logit", "log"}
        Shared across timepoints.
    range_policy : {"quasi", "strict"}
        Behavior when a pseudo-outcome leaves the link range.
    """

    bases: Sequence[Basis]
    link: str = "identity"
    range_policy: str = "quasi"

    def __post_init__(self):
        self.bases = [b if isinstance(b, Basis) else Basis(b) for b in self.bases]
        get_link(self.link)
        if self.range_policy not in ("quasi", "strict"):
            raise ContractError(f"unknown range policy {self.range_policy!r}")

    @property
    def K(self) -> int:
        return len(self.bases)

    def check(self, spec: ProblemSpec) -> None:
        if len(self.bases) != spec.K:
            raise ContractError(f"need {spec.K} outcome bases, got {len(self.bases)}")
        for k, b in enumerate(self.bases, start=1):
            for e in b.exprs:
                if e.max_l_time > k or e.max_a_time > k:
                    raise ContractError(f"outcome basis term {e.source!r} at k={k} reads the future")

    def nesting_problem(self) -> str | None:
        """Why the bases fail the nesting requirement of the weighted estimator, or None."""
        if not self.bases[0].has_constant:
            return "s_1 must contain the constant term 1"
        for k in range(1, len(self.bases)):
            if not self.bases[k].contains(self.bases[k - 1]):
                return f"s_{k} is not a sub-vector of s_{k + 1}"
        return None

    def require_nested(self) -> None:
        msg = self.nesting_problem()
        if msg is not None:
            raise ContractError("outcome bases must be nested with a constant column "
                                f"(each s_j a sub-vector of s_k for j < k): {msg}")

    def to_config(self) -> dict:
        return {"bases": [b.to_list() for b in self.bases], "link": self.link,
                "range_policy": self.range_policy}

    @classmethod
    def from_config(cls, cfg: dict) -> "IceModelSet":
        return cls([Basis(t) for t in cfg["bases"]], cfg.get("link", "identity"),
                   cfg.get("range_policy", "quasi"))


@dataclass
class StepRecord:
    """One solved estimating equation: ``sum w x (y - Psi(x'coef + offset)) = 0``."""

    label: str
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    offset: np.ndarray
    fit: GlmFit

    def score(self) -> np.ndarray:
        """Weight-normalized score at the returned coefficients."""
        return score(self.X, self.y, self.weights, self.offset, self.fit.coefficients, self.fit.link)

    def summary(self) -> dict:
        return {"label": self.label, "coefficients": self.fit.coefficients.tolist(),
                "converged": bool(self.fit.converged), "iterations": int(self.fit.iterations),
                "gradient_norm": float(self.fit.final_gradient_norm),
                "ridge": float(self.fit.diagnostics.get("ridge", 0.0)),
                "messages": list(self.fit.diagnostics.get("messages", []))}


class FittedEta:
    """History function ``Psi(tau' s_k(L, A) + sum_c coef_c' z_c(L, A))``.

    ``extras`` is a list of ``(coef, covariate_fn)`` pairs where
    ``covariate_fn(L, A)`` returns an (n, p_c) matrix.
    """

    def __init__(self, k: int, basis: Basis, tau: np.ndarray, link, extras=()):
        self.k = k
        self.basis = basis
        self.tau = np.asarray(tau, dtype=float)
        self.link = get_link(link)
        self.extras = list(extras)

    def linear(self, L, A) -> np.ndarray:
        lin = self.basis.matrix(L, A[:, :self.k]) @ self.tau
        for coef, fn in self.extras:
            lin = lin + np.asarray(fn(L, A[:, :self.k])) @ np.atleast_1d(coef)
        return lin

    def __call__(self, L, A) -> np.ndarray:
        return self.link.mean(self.linear(L, A))

    def extend(self, coef, fn) -> "FittedEta":
        return FittedEta(self.k, self.basis, self.tau, self.link, self.extras + [(np.atleast_1d(coef), fn)])


def inverse_pi_covariate(pf: PropensityFit, j: int, k: int, factor: Basis | None = None,
                         truncate: bool = True) -> Callable:
    """Covariate ``factor(L, A) / pi_hat_{j..k}(L, A)``; ``factor`` defaults to 1."""
    def fn(L, A):
        inv = 1.0 / pi_of_history(pf, L, A, j, k, truncate)
        if factor is None:
            return inv[:, None]
        return factor.matrix(L, A) * inv[:, None]
    return fn


def fit_step(label: str, X, y, w, link, offset=None, range_policy: str = "quasi",
             on_singular: str = "raise") -> StepRecord:
    """Fit one regression and wrap failures with ``label``."""
    n = len(y)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not np.any(w > 0):
        raise EstimatorError(label, "no regime-compatible rows to fit")
    try:
        fit = fit_glm(X, y, w, off, link, on_singular=on_singular, range_policy=range_policy)
    except (SingularDesignError, LinkRangeError, ValueError) as exc:
        raise EstimatorError(label, str(exc)) from exc
    if not fit.converged:
        raise EstimatorError(label, "regression did not converge: " + "; ".join(fit.diagnostics["messages"]))
    return StepRecord(label, np.asarray(X, dtype=float), np.asarray(y, dtype=float), w, off, fit)


def _bind(ds: Dataset, spec: ProblemSpec, models: IceModelSet | None = None) -> Dataset:
    """The dataset viewed under ``spec`` (its regime and outcome functional)."""
    if models is not None:
        models.check(spec)
    if spec is ds.spec:
        return ds
    return Dataset(ds.L, ds.A, spec, ds.weights)


def _design(models: IceModelSet, ds: Dataset, k: int) -> np.ndarray:
    return models.bases[k - 1].matrix(ds.hist_L(k), ds.hist_A(k))


def _report(name: str, ds: Dataset, Y1: np.ndarray, steps: list, etas: list, Y: list,
            pf: PropensityFit | None, models: IceModelSet | None, extra: dict | None = None) -> EstimateReport:
    diag = {"steps": [s.summary() for s in steps]}
    if pf is not None:
        diag["truncated"] = pf.n_truncated(ds)
    if extra:
        diag.update(extra)
    cfg = {"models": models.to_config()} if models is not None else {}
    return EstimateReport(name, ds.mean(Y1), diagnostics=diag, config=cfg,
                          details={"steps": steps, "eta": etas, "Y": Y})


def _iterate(ds: Dataset, models: IceModelSet, fitter) -> tuple[list, list, list]:
    """Backward loop.  ``fitter(k, outcome, w)`` returns ``(eta_fn, steps)``."""
    K = ds.K
    Y = [None] * (K + 1)
    Y[K] = ds.spec.psi(ds.L)
    etas = [None] * K
    steps: list = []
    for k in range(K, 0, -1):
        w = ds.weights * pi_star_batch(ds, 1, k)
        eta, recs = fitter(k, Y[k], w)
        etas[k - 1] = eta
        steps = recs + steps
        Y[k - 1] = y_batch(eta, ds, k)
    return Y, etas, steps


# ---------------------------------------------------------------------------
# estimators


def estimate_ipw(ds: Dataset, spec: ProblemSpec, pf: PropensityFit) -> EstimateReport:
    """Inverse probability weighted mean ``P_n[psi pi*^K / pi_hat^K]``.

    The raw-weight value is reported in the diagnostics.
    """
    ds = _bind(ds, spec)
    K = spec.K
    psi = spec.psi(ds.L)
    star = pi_star_batch(ds, 1, K)
    num = np.where(star > 0, psi * star, 0.0)
    est = ds.mean(num / pf.pi_hat(ds, 1, K))
    raw_pi = pf.pi_raw(ds, 1, K)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = ds.mean(np.where(star > 0, num / raw_pi, 0.0))
    diag = {"raw_estimate": raw, "truncated": pf.n_truncated(ds)}
    if not np.any((star > 0) & (ds.weights > 0)):
        diag["warning"] = "no compliant paths"
    return EstimateReport("ipw", est, diagnostics=diag)


def estimate_ice(ds: Dataset, spec: ProblemSpec, models: IceModelSet) -> EstimateReport:
    """Plain iterated conditional expectation (sequential regression)."""
    ds = _bind(ds, spec, models)
    return _weighted(ds, models, None, "ice")


def estimate_weighted_ice(ds: Dataset, spec: ProblemSpec, models: IceModelSet,
                          weights: str | Callable = "inverse-pi-hat",
                          pf: PropensityFit | None = None) -> EstimateReport:
    """Iterated regression with fitting weights ``pi*^k * omega_k``.

    Parameters
    ----------
    weights : "inverse-pi-hat" or callable
        ``omega_k = 1 / pi_hat^k`` (needs ``pf``), or ``weights(ds, k)``
        returning an (n,) array.
    """
    ds = _bind(ds, spec, models)
    if weights == "inverse-pi-hat":
        if pf is None:
            raise ContractError("inverse-pi-hat weights need a propensity fit")
        omega = lambda d, k: 1.0 / pf.pi_hat(d, 1, k)
        name = "weighted_ice_inverse_pi"
    elif callable(weights):
        omega = weights
        name = "weighted_ice"
    else:
        raise ContractError(f"unknown weight choice {weights!r}")
    rep = _weighted(ds, models, omega, name)
    if pf is not None:
        rep.diagnostics["truncated"] = pf.n_truncated(ds)
    return rep


def _weighted(ds, models, omega, name) -> EstimateReport:
    basis_link = models.link

    def fitter(k, outcome, w):
        if omega is not None:
            w = w * np.asarray(omega(ds, k), dtype=float)
        rec = fit_step(f"timepoint {k}", _design(models, ds, k), outcome, w, basis_link,
                       range_policy=models.range_policy)
        return FittedEta(k, models.bases[k - 1], rec.fit.coefficients, basis_link), [rec]

    Y, etas, steps = _iterate(ds, models, fitter)
    return _report(name, ds, Y[0], steps, etas, Y, None, models)


def estimate_bang(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit) -> EstimateReport:
    """Iterated regression on the extended design ``[s_k, 1/pi_hat^k]`` fit jointly."""
    ds = _bind(ds, spec, models)
    link = models.link

    def fitter(k, outcome, w):
        cov = inverse_pi_covariate(pf, 1, k)
        X = np.column_stack([_design(models, ds, k), cov(ds.hist_L(k), ds.hist_A(k))])
        rec = fit_step(f"timepoint {k}", X, outcome, w, link, range_policy=models.range_policy,
                       on_singular="ridge")
        coef = rec.fit.coefficients
        eta = FittedEta(k, models.bases[k - 1], coef[:-1], link, [(coef[-1:], cov)])
        return eta, [rec]

    Y, etas, steps = _iterate(ds, models, fitter)
    lam = [float(s.fit.coefficients[-1]) for s in steps]
    return _report("bang", ds, Y[0], steps, etas, Y, pf, models, {"lambda": lam})


def estimate_greedy(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit,
                    fix_lambda_zero: bool = False) -> EstimateReport:
    """Greedy extension: fit ``tau_k`` first, then a scalar on ``1/pi_hat^k`` with offset.

    With ``fix_lambda_zero`` the scalar step is skipped, which reproduces
    :func:`estimate_ice`.
    """
    ds = _bind(ds, spec, models)
    link = models.link
    lams: list = []

    def fitter(k, outcome, w):
        S = _design(models, ds, k)
        rec = fit_step(f"timepoint {k}", S, outcome, w, link, range_policy=models.range_policy)
        eta = FittedEta(k, models.bases[k - 1], rec.fit.coefficients, link)
        if fix_lambda_zero:
            lams.insert(0, 0.0)
            return eta, [rec]
        cov = inverse_pi_covariate(pf, 1, k)
        z = cov(ds.hist_L(k), ds.hist_A(k))
        ext = fit_step(f"timepoint {k} extension", z, outcome, w, link, offset=S @ rec.fit.coefficients,
                       range_policy=models.range_policy, on_singular="ridge")
        lams.insert(0, float(ext.fit.coefficients[0]))
        return eta.extend(ext.fit.coefficients, cov), [rec, ext]

    Y, etas, steps = _iterate(ds, models, fitter)
    return _report("greedy", ds, Y[0], steps, etas, Y, pf, models, {"lambda": lams})
