"""Multiply robust estimators built on the augmented inverse-weighted outcome Q_j.

For working propensities ``h`` and outcome regressions ``eta``,

    Q_{K+1} = psi,   Q_j = (h*_j / h_j) (Q_{j+1} - eta_j) + y_j(eta_j),

where ``y_j`` averages ``eta_j`` over the regime's treatment density.  Its
mean equals the regime mean whenever, at every timepoint, either the
propensity or the outcome regression is right.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .expr import Basis
from .glm import score
from .ice import (FittedEta, IceModelSet, StepRecord, _bind, _design, _report, estimate_ice,
                  estimate_weighted_ice, fit_step, inverse_pi_covariate)
from .propensity import EPSILON, PropensityFit
from .report import EstimateReport, EstimatorError
from .trajectory import (ContractError, Dataset, ProblemSpec, Trajectory, _single, hstar_realized, pi_star_batch,
                         y_batch)

FORMS = ("recursive", "sum", "telescoped")


def _realized_ratio(ds: Dataset, h_fn, k: int, truncate: bool, eps: float) -> np.ndarray:
    """``h*_k(A_k | .) / h_k(A_k | .)`` at the observed history, 0 where ``h*_k = 0``."""
    hs = hstar_realized(ds, k)
    m = np.asarray(h_fn(ds.hist_L(k), ds.hist_A(k - 1)), dtype=float)
    h = m[np.arange(ds.n), ds.spec.code_index(k, ds.A[:, k - 1])]
    if truncate:
        h = np.maximum(h, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(hs == 0, 0.0, hs / h)


class QInputs:
    """Per-subject pieces of the Q recursion: ratios, realized eta and regime averages."""

    def __init__(self, ds: Dataset, h_fns: Sequence, eta_fns: Sequence, start: int = 1,
                 truncate: bool = False, eps: float = EPSILON):
        K = ds.K
        self.K = K
        self.start = start
        self.psi = ds.spec.psi(ds.L)
        self.r = [None] * (K + 1)
        self.eta = [None] * (K + 1)
        self.y = [None] * (K + 2)
        self.y[K + 1] = self.psi
        for k in range(start, K + 1):
            self.r[k] = _realized_ratio(ds, h_fns[k - 1], k, truncate, eps)
            f = eta_fns[k - 1]
            self.eta[k] = np.asarray(f(ds.hist_L(k), ds.hist_A(k)), dtype=float)
            self.y[k] = y_batch(f, ds, k)

    def R(self, j: int, k: int) -> np.ndarray:
        out = np.ones_like(self.psi)
        for r in range(j, k + 1):
            out = out * self.r[r]
        return out

    def recursive(self, j: int) -> np.ndarray:
        Q = self.psi
        for k in range(self.K, j - 1, -1):
            Q = self.r[k] * (Q - self.eta[k]) + self.y[k]
        return Q

    def sum_form(self, j: int) -> np.ndarray:
        if j == self.K + 1:
            return self.psi
        out = self.y[j].copy()
        for k in range(j, self.K + 1):
            out = out + self.R(j, k) * (self.y[k + 1] - self.eta[k])
        return out

    def telescoped(self, j: int) -> np.ndarray:
        out = self.R(j, self.K) * self.psi
        for k in range(j, self.K + 1):
            out = out - (self.R(j, k) * self.eta[k] - self.R(j, k - 1) * self.y[k])
        return out

    def form(self, name: str, j: int) -> np.ndarray:
        if not (self.start <= j <= self.K + 1):
            raise ContractError(f"Q_{j} needs nuisances from timepoint {j}")
        if name == "recursive":
            return self.recursive(j)
        if name == "sum":
            return self.sum_form(j)
        if name == "telescoped":
            return self.telescoped(j)
        raise ContractError(f"unknown form {name!r}; choose from {FORMS}")


def q_batch(ds: Dataset, ns, j: int = 1, form: str = "recursive", truncate: bool = False,
            eps: float = EPSILON) -> np.ndarray:
    """``Q_j`` for every row of ``ds``.

    Parameters
    ----------
    ns : NuisanceSet-like
        Has ``h_dag`` (density functions) and ``eta_dag`` (history functions).
    form : {"recursive", "sum", "telescoped"}
        The backward one-step form, the sum of weighted residuals, or the
        telescoped inverse-weighting form.
    """
    if j == ds.K + 1:
        return ds.spec.psi(ds.L)
    return QInputs(ds, ns.h_dag, ns.eta_dag, j, truncate, eps).form(form, j)


def q_recursion(traj: Trajectory, spec: ProblemSpec, ns, j: int, form: str = "recursive",
                truncate: bool = False) -> float:
    """``Q_j`` on a single record."""
    if not (1 <= j <= spec.K + 1):
        raise ContractError(f"timepoint {j} out of range")
    return float(q_batch(_single(traj, spec), ns, j, form, truncate)[0])


def _q_mean(ds: Dataset, pf: PropensityFit, etas: Sequence, truncate: bool = True) -> tuple[float, np.ndarray]:
    Q = QInputs(ds, pf.densities, etas, 1, truncate, pf.epsilon).recursive(1)
    return ds.mean(Q), Q


# ---------------------------------------------------------------------------
# estimators


def estimate_mr(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit,
                truncate: bool = True, fit_weights: str = "regime") -> EstimateReport:
    """Iterated regression of the multiply robust pseudo-outcome ``Q_{k+1}``.

    Parameters
    ----------
    fit_weights : {"regime", "inverse-pi-hat"}
        Fitting weights ``pi*^k`` or ``pi*^k / pi_hat^k``; the second is the
        Q-route of the inverse-weighted iterated regression.
    truncate : bool
        Floor fitted densities at ``pf.epsilon`` inside ``Q``.

    Under ``range_policy="strict"`` a pseudo-outcome outside the link range
    aborts; the inverse-weighted or greedy variants keep outcomes in range.
    """
    ds = _bind(ds, spec, models)
    K = spec.K
    link = models.link
    Q = spec.psi(ds.L)
    etas = [None] * K
    Qs = [None] * (K + 1)
    Qs[K] = Q
    steps: list[StepRecord] = []
    for k in range(K, 0, -1):
        w = ds.weights * pi_star_batch(ds, 1, k)
        if fit_weights == "inverse-pi-hat":
            w = w / pf.pi_hat(ds, 1, k)
        elif fit_weights != "regime":
            raise ContractError(f"unknown fit weights {fit_weights!r}")
        try:
            rec = fit_step(f"timepoint {k}", _design(models, ds, k), Q, w, link, range_policy=models.range_policy)
        except EstimatorError as exc:
            if "outside the range" in str(exc):
                raise EstimatorError(exc.where, str(exc) + "; the multiply robust outcome left the link range, "
                                     "use the inverse-weighted (reg) or greedy multiply robust estimator") from exc
            raise
        steps.insert(0, rec)
        eta = FittedEta(k, models.bases[k - 1], rec.fit.coefficients, link)
        etas[k - 1] = eta
        r = _realized_ratio(ds, pf.densities[k - 1], k, truncate, pf.epsilon)
        Q = r * (Q - eta(ds.hist_L(k), ds.hist_A(k))) + y_batch(eta, ds, k)
        Qs[k - 1] = Q
    rep = _report("mr" if fit_weights == "regime" else "mr_inverse_pi", ds, Qs[0], steps, etas, Qs, pf, models)
    rep.diagnostics["raw_q_estimate"] = _q_mean(ds, pf, etas, truncate=False)[0]
    return rep


def estimate_dr_plugin(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit,
                       truncate: bool = True) -> EstimateReport:
    """``P_n[Q_1(h_hat, eta_hat)]`` with ``eta_hat`` from plain iterated regression."""
    ice = estimate_ice(ds, spec, models)
    ds = _bind(ds, spec, models)
    est, Q = _q_mean(ds, pf, ice.details["eta"], truncate)
    diag = dict(ice.diagnostics)
    diag["ice_estimate"] = ice.estimate
    diag["truncated"] = pf.n_truncated(ds)
    diag["raw_q_estimate"] = _q_mean(ds, pf, ice.details["eta"], truncate=False)[0]
    return EstimateReport("dr_plugin", est, diagnostics=diag, config=ice.config,
                          details={**ice.details, "Q1": Q})


def estimate_reg_mr(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit,
                    truncate: bool = True) -> EstimateReport:
    """Iterated regression weighted by ``1 / pi_hat^k`` on nested outcome bases.

    Two independent routes are computed: weighted iterated regression of
    the regime averages, and iterated regression of ``Q_{k+1}`` with weights
    ``pi*^k / pi_hat^k``.  The nesting of the bases makes them coincide;
    the gaps are reported in the diagnostics.
    """
    models.require_nested()
    if truncate:
        omega = lambda d, k: 1.0 / pf.pi_hat(d, 1, k)
    else:
        omega = lambda d, k: 1.0 / pf.pi_raw(d, 1, k)
    rep = estimate_weighted_ice(ds, spec, models, omega)
    rep.estimator = "reg"
    ds = _bind(ds, spec, models)
    q_same_eta, _ = _q_mean(ds, pf, rep.details["eta"], truncate)
    q_route = estimate_mr(ds, spec, models, pf, truncate=truncate, fit_weights="inverse-pi-hat")
    rep.diagnostics.update({
        "truncated": pf.n_truncated(ds),
        "q_of_fitted_eta": q_same_eta,
        "q_route_estimate": q_route.estimate,
        "dual_path_gap": abs(rep.estimate - q_route.estimate),
        "q_identity_gap": abs(rep.estimate - q_same_eta),
    })
    rep.details["q_route"] = q_route
    return rep


def estimate_mr_greedy(ds: Dataset, spec: ProblemSpec, models: IceModelSet, pf: PropensityFit,
                       truncate: bool = True) -> EstimateReport:
    """Greedy multiply robust iterated regression.

    For ``k = K..1``: fit ``tau_k`` on ``Y_{k+1}^{(k)}``; then for
    ``j = k-1..0`` fit ``lambda_k^{(j)}`` on the covariate
    ``s_j / pi_hat_{j+1..k}`` (``s_0 = 1``) with every earlier term as
    offset, and average the extended fit over the regime to get
    ``Y_k^{(j)}``.  The estimate is ``P_n[Y_1^{(0)}]``.

    The diagnostics carry the re-evaluated score equations of the ``tau``
    fits against ``Y_{j+1}^{(j)}`` and against ``Q_{j+1}(h_hat, eta^{(j)})``,
    and the gap between the estimate and ``P_n[Q_1(h_hat, eta^{(0)})]``.
    """
    ds = _bind(ds, spec, models)
    K = spec.K
    link = models.link
    psi = spec.psi(ds.L)
    s0 = Basis(["1"])
    bases = [s0] + list(models.bases)
    # Y[j][k]: pseudo-outcome Y_k^{(j)}; eta[j][k]: fitted eta_k^{(j)} (j < k)
    Y = [[None] * (K + 2) for _ in range(K + 1)]
    for j in range(K + 1):
        Y[j][K + 1] = psi
    eta = [[None] * (K + 1) for _ in range(K + 1)]
    tau_eta: list = [None] * (K + 1)
    tau_steps: list = [None] * (K + 1)
    lam_steps: dict = {}
    for k in range(K, 0, -1):
        w = ds.weights * pi_star_batch(ds, 1, k)
        S = _design(models, ds, k)
        rec = fit_step(f"timepoint {k}", S, Y[k][k + 1], w, link, range_policy=models.range_policy)
        tau_steps[k] = rec
        cur = FittedEta(k, models.bases[k - 1], rec.fit.coefficients, link)
        tau_eta[k] = cur
        for j in range(k - 1, -1, -1):
            cov = inverse_pi_covariate(pf, j + 1, k, bases[j], truncate)
            Z = cov(ds.hist_L(k), ds.hist_A(k))
            off = cur.linear(ds.hist_L(k), ds.hist_A(k))
            lrec = fit_step(f"timepoint {k}, inner {j}", Z, Y[j][k + 1], w, link, offset=off,
                            range_policy=models.range_policy, on_singular="ridge")
            lam_steps[(k, j)] = lrec
            cur = cur.extend(lrec.fit.coefficients, cov)
            eta[j][k] = cur
            Y[j][k] = y_batch(cur, ds, k)
    est = ds.mean(Y[0][1])

    # score equations of the tau fits, against both outcomes
    aa, bb = {}, {}
    for j in range(1, K + 1):
        aa[j] = float(np.max(np.abs(tau_steps[j].score())))
        etas_j = [None] * j + [eta[j][k] for k in range(j + 1, K + 1)]
        Qn = QInputs(ds, pf.densities, etas_j, j + 1, truncate, pf.epsilon).recursive(j + 1) if j < K else psi
        rec = tau_steps[j]
        bb[j] = float(np.max(np.abs(score(rec.X, Qn, rec.weights, rec.offset, rec.fit.coefficients, rec.fit.link))))
    q0, _ = _q_mean(ds, pf, [eta[0][k] for k in range(1, K + 1)], truncate)
    steps = [tau_steps[k] for k in range(1, K + 1)] + [lam_steps[key] for key in sorted(lam_steps)]
    diag = {
        "steps": [s.summary() for s in steps],
        "lambda": {f"{k},{j}": lam_steps[(k, j)].fit.coefficients.tolist() for (k, j) in sorted(lam_steps)},
        "tau_score": {str(j): v for j, v in aa.items()},
        "q_score": {str(j): v for j, v in bb.items()},
        "q_of_fitted_eta": q0,
        "q_identity_gap": abs(est - q0),
        "truncated": pf.n_truncated(ds),
    }
    return EstimateReport("mr_greedy", est, diagnostics=diag, config={"models": models.to_config()},
                          details={"Y": Y, "eta": eta, "tau_eta": tau_eta, "tau_steps": tau_steps,
                                   "lambda_steps": lam_steps})


def dropout_equation_chain(ds: Dataset, models: IceModelSet, pf: PropensityFit,
                           rep: EstimateReport) -> dict:
    """Re-derive the greedy multiply robust fit for two-visit dropout data by hand.

    Applies to ``K = 2``, binary treatments meaning "still observed", the
    static regime ``(1, 1)`` and a logit link.  Each displayed estimating
    equation is rebuilt from the fitted coefficients in ``rep`` with explicit
    ``h1 = h_1(1 | L_1)`` and ``h2 = h_2(1 | A_1 = 1, L_1, L_2)``, without the
    generic recursion.  Returns the sup-norm residual of each equation; the
    last entry compares the estimate with the mean of the final fitted values.
    """
    if ds.K != 2 or models.link != "logit":
        raise ContractError("the dropout chain is defined for K = 2 with a logit link")
    from scipy.special import expit

    n = ds.n
    A1, A2 = ds.A[:, 0].astype(float), ds.A[:, 1].astype(float)
    ones = np.ones((n, 1), dtype=int)
    L1, L2 = ds.hist_L(1), ds.hist_L(2)
    s1 = models.bases[0].matrix(L1, ones)
    s2 = models.bases[1].matrix(L2, np.ones((n, 2), dtype=int))
    h1 = pf.probs(1, L1, np.zeros((n, 0), dtype=int))[:, ds.spec.treatment_spaces[0].index(1)]
    h2 = pf.probs(2, L2, ones)[:, ds.spec.treatment_spaces[1].index(1)]
    h1, h2 = pf.floor(h1), pf.floor(h2)
    Y3 = np.where(A2 == 1, ds.spec.psi(ds.L), 0.0)
    d = rep.details
    tau2 = d["tau_steps"][2].fit.coefficients
    tau1 = d["tau_steps"][1].fit.coefficients
    lam21 = d["lambda_steps"][(2, 1)].fit.coefficients
    lam20 = d["lambda_steps"][(2, 0)].fit.coefficients[0]
    lam10 = d["lambda_steps"][(1, 0)].fit.coefficients[0]
    w = ds.weights / ds.weights.sum()

    def pn(M):
        return float(np.max(np.abs(w @ M)))

    lin2 = s2 @ tau2
    g1 = pn(A2[:, None] * s2 * (Y3 - expit(lin2))[:, None])
    z21 = s1 / h2[:, None]
    lin21 = lin2 + z21 @ lam21
    g2 = pn(A2[:, None] * z21 * (Y3 - expit(lin21))[:, None])
    z20 = 1.0 / (h1 * h2)
    lin20 = lin21 + lam20 * z20
    g3 = pn(A2 * z20 * (Y3 - expit(lin20)))
    Y2_1 = expit(lin21)
    Y2_0 = expit(lin20)
    g4 = pn(A1[:, None] * s1 * (Y2_1 - expit(s1 @ tau1))[:, None])
    z10 = 1.0 / h1
    Y1_0 = expit(s1 @ tau1 + lam10 * z10)
    g5 = pn(A1 * z10 * (Y2_0 - Y1_0))
    g6 = abs(float(w @ Y1_0) - rep.estimate)
    return {"g1": g1, "g2": g2, "g3": g3, "g4": g4, "g5": g5, "g6": g6}
