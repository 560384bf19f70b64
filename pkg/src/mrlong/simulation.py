"""Simulation scenarios, the Monte Carlo driver and the robustness and drift studies.

Every scenario is a discrete law (small supports for the robustness
studies, fine grids on ``[0, 1]`` standing in for smooth covariates in the
cross-fit and drift studies), so the target and every drift term are exact.
Misspecification is switched per timepoint: a correct working model is
saturated in the history it may read, a wrong one keeps main effects only.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .catalog import CATALOG, lookup
from .crossfit import (ESTIMATORS as CF_ESTIMATORS, LeakageError, SeriesLearnerConfig, algorithm6, drift_diagnostic,
                       multi_layer, series_learner, split_nuisances, two_layer)
from .discrete_law import DiscreteLaw, g_formula_theta, load_fixture, sample
from .expr import Basis
from .ice import IceModelSet
from .propensity import PropensityModel, fit_propensities
from .report import SCHEMA_VERSION, jsonable
from .trajectory import ContractError, Dataset, ProblemSpec, RegimeSpec

CROSSFIT_ESTIMATORS = CF_ESTIMATORS + ("mr_two_layer", "mr_multi_layer")
CONSISTENT_Z = 2.0
BIASED_Z = 5.0
INVALID_FAILURE_RATE = 0.2


# ---------------------------------------------------------------------------
# correctness patterns


@dataclass(frozen=True)
class Pattern:
    """Which working models are correct at each timepoint."""

    h: tuple
    g: tuple

    @property
    def K(self) -> int:
        return len(self.h)

    @property
    def name(self) -> str:
        if not any(self.h) and not any(self.g):
            return "none"
        parts = []
        for k, (a, b) in enumerate(zip(self.h, self.g), start=1):
            tag = ("H" if a else "") + ("G" if b else "")
            parts.append(f"{tag or 'x'}{k}")
        return "-".join(parts)

    @classmethod
    def parse(cls, name: str, K: int) -> "Pattern":
        if name == "none":
            return cls((False,) * K, (False,) * K)
        toks = name.split("-")
        if len(toks) != K:
            raise ContractError(f"pattern {name!r} needs {K} parts")
        h, g = [], []
        for k, t in enumerate(toks, start=1):
            if not t.endswith(str(k)):
                raise ContractError(f"pattern part {t!r} should end with timepoint {k}")
            tag = t[:-len(str(k))]
            if tag not in ("H", "G", "HG", "x"):
                raise ContractError(f"pattern part {t!r}: use H, G, HG or x")
            h.append("H" in tag)
            g.append("G" in tag)
        return cls(tuple(h), tuple(g))

    def consistent(self, estimator: str) -> bool:
        return lookup(estimator).consistent_when(self.h, self.g)


def robustness_patterns(K: int) -> list[Pattern]:
    """Every way to get exactly one model right per timepoint, then the all-wrong control."""
    out = [Pattern(tuple(c == "H" for c in combo), tuple(c == "G" for c in combo))
           for combo in product("GH", repeat=K)]
    return out + [Pattern((False,) * K, (False,) * K)]


# ---------------------------------------------------------------------------
# building laws from functions


def _grid(supports: Sequence[np.ndarray], a_spaces: Sequence[Sequence[int]], level: int):
    shape = []
    for k in range(len(a_spaces)):
        shape += [len(supports[k]), len(a_spaces[k])]
    shape.append(len(supports[-1]))
    shape = shape[:level]
    idx = np.indices(shape).reshape(level, -1) if level else np.zeros((0, 1), dtype=int)
    L = [np.asarray(supports[k], dtype=float)[idx[2 * k]] for k in range((level + 1) // 2)]
    A = np.column_stack([np.asarray(a_spaces[k])[idx[2 * k + 1]] for k in range(level // 2)]) \
        if level >= 2 else np.zeros((idx.shape[1], 0), dtype=int)
    return L, A, tuple(shape)


def tabulated_law(supports: Sequence[Sequence[float]], a_spaces: Sequence[Sequence[int]],
                  g_fns: Sequence[Callable], h_fns: Sequence[Callable]) -> DiscreteLaw:
    """Discrete law from conditional probability functions of the history.

    ``g_fns[k](L, A)`` returns unnormalized weights over the support of
    ``L_{k+1}`` for histories ``(L_1..L_k, A_1..A_k)``;
    ``h_fns[k](L, A_prev)`` returns ``P(A_{k+1} = 1 | .)`` for binary
    treatments.  Rows are normalized here.
    """
    K = len(a_spaces)
    g, h = [], []
    for k in range(K + 1):
        L, A, shape = _grid(supports, a_spaces, 2 * k)
        w = np.asarray(g_fns[k](L, A), dtype=float).reshape(-1, len(supports[k]))
        g.append((w / w.sum(axis=1, keepdims=True)).reshape(shape + (len(supports[k]),)))
        if k < K:
            L, A, shape = _grid(supports, a_spaces, 2 * k + 1)
            p = np.asarray(h_fns[k](L, A), dtype=float).reshape(-1)
            h.append(np.stack([1 - p, p], axis=-1).reshape(shape + (2,)))
    return DiscreteLaw([list(s) for s in supports], [list(a) for a in a_spaces], g, h)


def _static_spec(K: int, psi: str) -> ProblemSpec:
    return ProblemSpec(K, [[0, 1]] * K, [1] * (K + 1), psi, RegimeSpec.static([1] * K))


def _lv(x, v):
    return (np.asarray(x) == v).astype(float)


def robustness_law() -> tuple[DiscreteLaw, ProblemSpec]:
    """Two timepoints, three-level covariates, binary outcome; effects are non-additive."""
    sup = [[0.0, 1.0, 2.0], [0.0, 1.0, 2.0], [0.0, 1.0]]

    def g1(L, A):
        return np.tile([0.3, 0.4, 0.3], (A.shape[0], 1))

    def h1(L, A):
        return expit(np.array([1.6, -1.6, 1.8])[L[0].astype(int)])

    def g2(L, A):
        l1, a1 = L[0], A[:, 0]
        s = np.column_stack([0.8 * _lv(l1, 1), 0.5 - 0.6 * _lv(l1, 2), 0.9 * a1 - 0.4 * _lv(l1, 1)])
        return np.exp(s)

    def h2(L, A):
        l1, l2, a1 = L[0], L[1], A[:, 0]
        return expit(0.6 - 1.4 * _lv(l2, 1) + 1.5 * _lv(l1, 1) * _lv(l2, 2)
                     - 0.8 * _lv(l1, 2) * _lv(l2, 0) + 0.5 * a1)

    def g3(L, A):
        l1, l2, a1, a2 = L[0], L[1], A[:, 0], A[:, 1]
        p = expit(-0.4 + 4.8 * _lv(l1, 2) * _lv(l2, 0) + 1.1 * _lv(l2, 1) - 1.0 * _lv(l1, 1)
                  + 0.7 * a2 + 0.4 * a1 - 3.9 * _lv(l1, 1) * _lv(l2, 2))
        return np.column_stack([1 - p, p])

    law = tabulated_law(sup, [[0, 1], [0, 1]], [g1, g2, g3], [h1, h2])
    return law, _static_spec(2, "L3")


# ---------------------------------------------------------------------------
# working models on discrete supports


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def _levels(name: str, support: Sequence[float]) -> list[str]:
    """Terms spanning functions of one covariate: itself plus indicators of its upper levels."""
    vals = sorted(float(v) for v in support)
    if len(vals) <= 1:
        return []
    return [name] + [f"({name} == {_fmt(v)})" for v in vals[2:]]


def saturated_terms(factors: Sequence[list[str]]) -> list[str]:
    """All products of one term per factor (``"1"`` always available)."""
    out = []
    for combo in product(*[["1"] + f for f in factors]):
        parts = [c for c in combo if c != "1"]
        out.append("*".join(parts) if parts else "1")
    return out


def _merge(first: Sequence[str], second: Sequence[str]) -> list[str]:
    seen = set(first)
    return list(first) + [t for t in second if t not in seen]


def working_models(law: DiscreteLaw, pattern: Pattern, link: str = "logit",
                   monotone: bool = False) -> tuple[PropensityModel, IceModelSet]:
    """Saturated models where the pattern says correct, main effects elsewhere.

    Outcome bases read only covariates (rows that enter an outcome fit share
    the static regime's treatments) and are nested: ``s_k`` always contains
    ``s_{k-1}``.  Treatment bases read covariates and earlier treatments;
    with ``monotone`` only rows still on treatment enter, so earlier
    treatments are dropped from the basis.
    """
    K = law.K
    lev = [_levels(f"L{k + 1}", np.asarray(law.l_supports[k]).ravel()) for k in range(K + 1)]
    r_bases, s_bases = [], []
    prev: list[str] = ["1"]
    for k in range(1, K + 1):
        if pattern.g[k - 1]:
            s = _merge(prev, saturated_terms(lev[:k]))
        else:
            s = _merge(prev, [f"L{j}" for j in range(1, k + 1) if lev[j - 1]])
        s_bases.append(Basis(s))
        prev = s
        factors = []
        for j in range(1, k + 1):
            factors.append(lev[j - 1])
            if j < k and not monotone:
                factors.append([f"A{j}"])
        factors = [f for f in factors if f]
        if pattern.h[k - 1]:
            r = saturated_terms(factors)
        else:
            r = ["1"] + [f[0] for f in factors]
        r_bases.append(Basis(r))
    return PropensityModel(r_bases, monotone), IceModelSet(s_bases, link)


# ---------------------------------------------------------------------------
# fine-grid laws for the learner studies


def _unit_grid(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


def _bump(x: np.ndarray, mu: np.ndarray, sd: float) -> np.ndarray:
    return np.exp(-0.5 * ((x[None, :] - np.asarray(mu)[:, None]) / sd) ** 2)


def _binary(p: np.ndarray) -> np.ndarray:
    return np.column_stack([1 - p, p])


def smooth_k2_law(grid: int = 12) -> tuple[DiscreteLaw, ProblemSpec]:
    """Two timepoints; covariates on a fine grid of ``[0, 1]`` with smooth conditionals."""
    x = _unit_grid(grid)
    sup = [x, x, [0.0, 1.0]]
    g = [lambda L, A: _bump(x, np.full(A.shape[0], 0.5), 0.3),
         lambda L, A: _bump(x, 0.25 + 0.4 * L[0] + 0.15 * A[:, 0], 0.2),
         lambda L, A: _binary(expit(-1.0 + 1.2 * L[0] + 1.5 * L[1] ** 2 + 0.5 * A[:, 0] + 0.6 * A[:, 1]
                                    - 0.8 * L[0] * L[1]))]
    h = [lambda L, A: expit(-0.3 + 1.2 * L[0]),
         lambda L, A: expit(-0.2 + 0.8 * L[0] + 0.9 * L[1] - 0.3 * A[:, 0])]
    return tabulated_law(sup, [[0, 1]] * 2, g, h), _static_spec(2, "L3")


def smooth_k3_law(grid: int = 10) -> tuple[DiscreteLaw, ProblemSpec]:
    """Three-timepoint analogue of :func:`smooth_k2_law`."""
    x = _unit_grid(grid)
    sup = [x, x, x, [0.0, 1.0]]
    g = [lambda L, A: _bump(x, np.full(A.shape[0], 0.5), 0.3),
         lambda L, A: _bump(x, 0.25 + 0.4 * L[0] + 0.15 * A[:, 0], 0.2),
         lambda L, A: _bump(x, 0.2 + 0.3 * L[1] + 0.2 * L[0] + 0.15 * A[:, 1], 0.2),
         lambda L, A: _binary(expit(-1.0 + L[0] + 1.2 * L[1] * L[2] + 0.8 * L[2] ** 2
                                    + 0.4 * A[:, 2] + 0.3 * A[:, 1] + 0.2 * A[:, 0]))]
    h = [lambda L, A: expit(-0.3 + 1.2 * L[0]),
         lambda L, A: expit(-0.2 + 0.8 * L[0] + 0.9 * L[1] - 0.3 * A[:, 0]),
         lambda L, A: expit(-0.1 + 0.7 * L[2] + 0.5 * L[0] - 0.4 * L[1])]
    return tabulated_law(sup, [[0, 1]] * 3, g, h), _static_spec(3, "L4")


def rough_k3_law(grid: int = 16, roughness: float = 2.5, spread: float = 0.25,
                 slope: float = 0.3) -> tuple[DiscreteLaw, ProblemSpec]:
    """Three timepoints with an oscillating second treatment density and last outcome regression.

    ``h_2`` and ``E[L_4 | past]`` wiggle in ``L_2`` and ``L_3``; a learner
    restricted to a coarse basis cannot follow either, while every other
    conditional is smooth.
    """
    x = _unit_grid(grid)
    sup = [_unit_grid(8), x, x, [0.0, 1.0]]
    g = [lambda L, A: np.ones((A.shape[0], 8)),
         lambda L, A: _bump(x, 0.3 + 0.4 * L[0] + 0.1 * A[:, 0], 0.25),
         lambda L, A: _bump(x, 0.3 + slope * L[1] + 0.2 * L[0] + 0.1 * A[:, 1], spread),
         lambda L, A: _binary(expit(-0.5 + 0.8 * L[0] + 0.6 * L[1] + roughness * np.sin(6 * np.pi * L[2])
                                    + 0.3 * A[:, 2]))]
    h = [lambda L, A: expit(0.2 + 0.8 * L[0]),
         lambda L, A: expit(0.3 + roughness * np.sin(5 * np.pi * L[1]) + 0.3 * L[0]),
         lambda L, A: expit(0.1 + 0.6 * L[2] - 0.3 * L[1])]
    return tabulated_law(sup, [[0, 1]] * 3, g, h), _static_spec(3, "L4")


@dataclass(frozen=True)
class Family:
    build: Callable
    monotone: bool = False
    link: str = "logit"


FAMILIES: dict[str, Family] = {
    "robustness_k2": Family(robustness_law),
    "dropout_k2": Family(lambda: load_fixture("k2_dropout"), monotone=True),
    "general_k3": Family(lambda: load_fixture("k3_general")),
    "smooth_k2": Family(smooth_k2_law, link="identity"),
    "smooth_k3": Family(smooth_k3_law, link="identity"),
    "rough_k3": Family(rough_k3_law, link="identity"),
}


# ---------------------------------------------------------------------------
# scenario configuration


def _learner_from(cfg, law: DiscreteLaw, spec: ProblemSpec):
    from .crossfit import OracleLearner

    if cfg == "oracle":
        return OracleLearner(law, spec)
    return series_learner(SeriesLearnerConfig.from_config(cfg or {}))


@dataclass
class ScenarioConfig:
    """A simulation study.

    Parameters
    ----------
    family : str
        Key of :data:`FAMILIES`.
    estimators : list of str
        Catalog ids and/or cross-fit ids (:data:`CROSSFIT_ESTIMATORS`).
    patterns : list of str
        Correctness patterns for the catalog estimators, e.g. ``"G1-H2"``;
        empty means every robustness pattern plus the all-wrong control.
    n : list of int
    R : int
        Replications per sample size.
    seed : int
        Root of the per-replication seeds.
    params : dict
        Keyword arguments of the family's law builder.
    learner : dict
        Cross-fit settings: ``eta`` and ``h`` learner configs (a series
        learner config dict or ``"oracle"``), ``U``, ``appendix_U``, ``link``.
    """

    family: str
    estimators: list = field(default_factory=lambda: ["mr"])
    patterns: list = field(default_factory=list)
    n: list = field(default_factory=lambda: [1000])
    R: int = 100
    seed: int = 0
    params: dict = field(default_factory=dict)
    learner: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown scenario family {self.family!r}; available: {', '.join(FAMILIES)}")
        for e in self.estimators:
            if e not in CROSSFIT_ESTIMATORS:
                lookup(e)
        if not self.estimators:
            raise ContractError("no estimators requested")
        self.n = [int(v) for v in self.n]
        if not self.n or min(self.n) < 1:
            raise ContractError("n grid must be nonempty with positive sizes")
        if self.R < 1:
            raise ContractError("R >= 1 required")

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {"family", "estimators", "patterns", "n", "R", "seed", "params", "learner"}
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown scenario fields: {sorted(extra)}")
        if "family" not in d:
            raise ContractError("scenario.family is required")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Scenario:
    config: ScenarioConfig
    law: DiscreteLaw
    spec: ProblemSpec
    theta: float
    family: Family

    @classmethod
    def build(cls, config: ScenarioConfig) -> "Scenario":
        fam = FAMILIES[config.family]
        law, spec = fam.build(**config.params)
        return cls(config, law, spec, g_formula_theta(law, spec), fam)

    def patterns(self) -> list[Pattern]:
        if self.config.patterns:
            return [Pattern.parse(p, self.spec.K) for p in self.config.patterns]
        return robustness_patterns(self.spec.K)

    def models(self, pattern: Pattern):
        return working_models(self.law, pattern, self.family.link, self.family.monotone)

    def sample(self, n: int, seed: int) -> Dataset:
        return sample(self.law, self.spec, n, seed)


def replication_seed(root: int, n_index: int, rep: int) -> int:
    """Counter-based seed of one replication; independent of evaluation order."""
    return int(np.random.SeedSequence([int(root), n_index, rep]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Monte Carlo driver


def summarize(values: Sequence[float], theta: float) -> dict:
    """Bias, Monte Carlo standard error, RMSE and a verdict for one cell."""
    v = np.asarray(values, dtype=float)
    ok = v[np.isfinite(v)]
    R = len(v)
    out = {"R": R, "R_ok": len(ok), "failures": R - len(ok),
           "failure_rate": (R - len(ok)) / R if R else 0.0}
    out["invalid"] = out["failure_rate"] > INVALID_FAILURE_RATE
    if len(ok) == 0:
        out.update(mean=None, bias=None, sd=None, mc_se=None, rmse=None, z=None, verdict="invalid")
        return out
    mean = float(ok.mean())
    sd = float(ok.std(ddof=1)) if len(ok) > 1 else float("nan")
    se = sd / np.sqrt(len(ok))
    bias = mean - theta
    z = bias / se if se > 0 else float("nan")
    if out["invalid"]:
        verdict = "invalid"
    elif not np.isfinite(z):
        verdict = "undetermined"
    elif abs(z) < CONSISTENT_Z:
        verdict = "consistent"
    elif abs(z) > BIASED_Z:
        verdict = "biased"
    else:
        verdict = "inconclusive"
    out.update(mean=mean, bias=bias, sd=sd, mc_se=se, rmse=float(np.sqrt(np.mean((ok - theta) ** 2))),
               z=z, verdict=verdict)
    return out


def _nan_to_none(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_to_none(v) for v in x]
    return x


CSV_COLUMNS = ["estimator", "pattern", "n", "R", "R_ok", "failures", "invalid", "mean", "bias", "sd", "mc_se",
               "rmse", "z", "verdict", "theory_consistent", "agrees", "truncation_incidents",
               "convergence_incidents", "split_mean_gap", "leakage_checks", "leakage_violations"]


@dataclass
class MonteCarloReport:
    """Per-(estimator, pattern, n) summaries plus the raw replicate estimates."""

    scenario: dict
    theta: float
    cells: list
    replicates: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def cell(self, estimator: str, pattern: str, n: int | None = None) -> dict:
        for c in self.cells:
            if c["estimator"] == estimator and c["pattern"] == pattern and (n is None or c["n"] == n):
                return c
        raise KeyError((estimator, pattern, n))

    def to_dict(self) -> dict:
        return _nan_to_none(jsonable(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MonteCarloReport":
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')}")
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for c in self.cells:
            w.writerow({k: ("" if c.get(k) is None else c.get(k)) for k in CSV_COLUMNS})
        return buf.getvalue()


def _crossfit_values(scen: Scenario, ds: Dataset, wanted: Sequence[str], seed: int) -> dict:
    cfg = scen.config.learner
    le = _learner_from(cfg.get("eta"), scen.law, scen.spec)
    lh = _learner_from(cfg.get("h"), scen.law, scen.spec)
    U = int(cfg.get("U", 5))
    aU = int(cfg.get("appendix_U", U))
    out = {}
    six = [e for e in wanted if e in CF_ESTIMATORS]
    if six:
        reps = algorithm6(ds, scen.spec, le, lh, cfg.get("link", "identity"), U, seed,
                          extensions=any(e.endswith(("bang", "reg")) for e in six))
        out.update({e: reps[e] for e in six})
    if "mr_two_layer" in wanted:
        out["mr_two_layer"] = two_layer(ds, scen.spec, le, lh, aU, seed)
    if "mr_multi_layer" in wanted:
        out["mr_multi_layer"] = multi_layer(ds, scen.spec, le, lh, aU, seed)
    return out


_SCENARIOS: dict = {}


def _scenario(sc: ScenarioConfig) -> Scenario:
    """Per-process cache so pooled workers build each law once."""
    key = json.dumps(sc.to_dict(), sort_keys=True)
    if key not in _SCENARIOS:
        _SCENARIOS.clear()
        _SCENARIOS[key] = Scenario.build(sc)
    return _SCENARIOS[key]


def parallel_map(fn, tasks: Sequence, threads: int = 1) -> list:
    """``[fn(t) for t in tasks]``, in a process pool when ``threads > 1``."""
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


def _mc_replication(task) -> dict:
    """Every requested estimate on one sampled dataset: ``key -> (value, truncated, issues)``."""
    sc, i_n, n, r, param, cf = task
    scen = _scenario(sc)
    seed = replication_seed(sc.seed, i_n, r)
    ds = scen.sample(n, seed)
    out = {}
    for p in (scen.patterns() if param else []):
        pm, ms = scen.models(p)
        try:
            pf = fit_propensities(ds, pm, errors="warn")
        except Exception:
            pf = None
        for e in param:
            if pf is None:
                out[(e, p.name)] = (float("nan"), 0, 0)
                continue
            issues = int(bool(pf.diagnostics["issues"]))
            try:
                rep = CATALOG[e].run(ds, scen.spec, ms, pf)
            except Exception:
                out[(e, p.name)] = (float("nan"), 0, issues)
                continue
            out[(e, p.name)] = (rep.estimate, int(bool(rep.diagnostics.get("truncated", 0))), issues)
    if cf:
        try:
            reps = _crossfit_values(scen, ds, cf, seed)
        except LeakageError:
            raise
        except Exception:
            reps = {}
        for e in cf:
            if e in reps:
                rep = reps[e]
                out[(e, "learner")] = (rep.estimate, int(bool(rep.diagnostics.get("truncated", 0))), 0)
                gap = abs(rep.estimate - float(np.mean(rep.per_split))) if rep.per_split else float("nan")
                out[("checks", e)] = (gap, int(rep.diagnostics.get("leakage_checks", 0)),
                                      int(rep.diagnostics.get("leakage_violations", 0)))
            else:
                out[(e, "learner")] = (float("nan"), 0, 0)
    return out


def run_mc(sc: ScenarioConfig, estimators: Sequence[str] | None = None,
           oracle_theta: float | None = None, threads: int = 1) -> MonteCarloReport:
    """Replicate every requested estimator over the scenario's patterns and sample sizes.

    Failed fits are recorded as missing values and counted; a cell with more
    than 20% failures is flagged invalid.  Catalog estimators run once per
    correctness pattern; cross-fit estimators run once per dataset under
    the pattern label ``"learner"``, and their cells also carry the largest
    gap between the estimate and its split mean and the leakage counts.
    ``threads > 1`` spreads replications over worker processes; the report
    does not depend on it.
    """
    scen = _scenario(sc)
    theta = scen.theta if oracle_theta is None else float(oracle_theta)
    wanted = list(estimators or sc.estimators)
    for e in wanted:
        if e not in CROSSFIT_ESTIMATORS:
            lookup(e)
    param = [e for e in wanted if e in CATALOG]
    cf = [e for e in wanted if e in CROSSFIT_ESTIMATORS]
    patterns = scen.patterns() if param else []
    keys = [(e, p.name) for p in patterns for e in param] + [(e, "learner") for e in cf]
    tasks = [(sc, i_n, n, r, param, cf) for i_n, n in enumerate(sc.n) for r in range(sc.R)]
    results = parallel_map(_mc_replication, tasks, threads)
    cells, replicates = [], {}
    for i_n, n in enumerate(sc.n):
        block = results[i_n * sc.R:(i_n + 1) * sc.R]
        for e, p in keys:
            vals = [res[(e, p)][0] for res in block]
            c = {"estimator": e, "pattern": p, "n": n}
            c.update(summarize(vals, theta))
            c["truncation_incidents"] = sum(res[(e, p)][1] for res in block)
            c["convergence_incidents"] = sum(res[(e, p)][2] for res in block)
            if p == "learner":
                checks = [res[("checks", e)] for res in block if ("checks", e) in res]
                c["split_mean_gap"] = max((g for g, _, _ in checks), default=None)
                c["leakage_checks"] = sum(k for _, k, _ in checks)
                c["leakage_violations"] = sum(v for _, _, v in checks)
            cells.append(c)
            replicates[f"{e}|{p}|{n}"] = vals
    return MonteCarloReport(sc.to_dict(), theta, cells, replicates)


def robustness_matrix(sc: ScenarioConfig, threads: int = 1) -> MonteCarloReport:
    """Run every correctness pattern and add the theory column from the pattern algebra.

    A cell agrees with theory when a predicted-consistent estimator is
    judged consistent (``|z| < 2``) or a predicted-inconsistent one is
    judged biased (``|z| > 5``).
    """
    if sc.patterns:
        raise ContractError("robustness_matrix enumerates its own patterns; leave `patterns` empty")
    rep = run_mc(sc, threads=threads)
    K = _scenario(sc).spec.K
    for c in rep.cells:
        if c["pattern"] == "learner":
            continue
        p = Pattern.parse(c["pattern"], K)
        c["theory_consistent"] = p.consistent(c["estimator"])
        want = "consistent" if c["theory_consistent"] else "biased"
        c["agrees"] = c["verdict"] == want
    return rep


# ---------------------------------------------------------------------------
# drift study


@dataclass
class DriftReport:
    """Exact drift of cross-fit DR and MR estimators across sample sizes."""

    scenario: dict
    theta: float
    rows: list
    slopes: dict
    replicates: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def row(self, flavor: str, n: int) -> dict:
        for r in self.rows:
            if r["flavor"] == flavor and r["n"] == n:
                return r
        raise KeyError((flavor, n))

    def to_dict(self) -> dict:
        return _nan_to_none(jsonable(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        cols = ["flavor", "n", "R", "mean_abs_drift", "mean_drift", "mc_bias", "mc_se"]
        terms = sorted({t for r in self.rows for t in r["mean_abs_terms"]})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + [f"abs_{t}" for t in terms])
        for r in self.rows:
            w.writerow([r[c] for c in cols] + [r["mean_abs_terms"].get(t, "") for t in terms])
        return buf.getvalue()


def loglog_slope(n: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` on ``log n``."""
    return float(np.polyfit(np.log(np.asarray(n, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)[0])


def _drift_replication(task) -> dict:
    sc, cfg, i_n, n, r = task
    scen = _scenario(sc)
    le = _learner_from(cfg.get("eta"), scen.law, scen.spec)
    lh = _learner_from(cfg.get("h"), scen.law, scen.spec)
    seed = replication_seed(sc.seed, i_n, r)
    ds = scen.sample(n, seed)
    reps = algorithm6(ds, scen.spec, le, lh, cfg.get("link", "identity"), int(cfg.get("U", 5)), seed,
                      extensions=False)
    out = {}
    for f, name in (("DR", "dr_cf"), ("MR", "mr_cf")):
        table = drift_diagnostic(scen.law, scen.spec, split_nuisances(reps, f), f)
        out[f] = (table.total, table.terms, reps[name].estimate)
    return out


def drift_rate_study(sc: ScenarioConfig, learner: dict | None = None, threads: int = 1) -> DriftReport:
    """Exact drift of the cross-fit DR and MR estimators over the ``n`` grid.

    Each replication draws a sample, fits the cross-fit nuisances, and
    evaluates the drift of every split's nuisances exactly under the law;
    a replication's drift is the split average.  Rows report the mean
    absolute drift, its per-term breakdown and the Monte Carlo bias of the
    estimates themselves.
    """
    scen = _scenario(sc)
    cfg = dict(sc.learner)
    cfg.update(learner or {})
    tasks = [(sc, cfg, i_n, n, r) for i_n, n in enumerate(sc.n) for r in range(sc.R)]
    results = parallel_map(_drift_replication, tasks, threads)
    rows, reps_out = [], {}
    for i_n, n in enumerate(sc.n):
        block = results[i_n * sc.R:(i_n + 1) * sc.R]
        for f in ("DR", "MR"):
            tot = np.asarray([b[f][0] for b in block])
            terms = [b[f][1] for b in block]
            est = np.asarray([b[f][2] for b in block])
            keys = list(terms[0])
            sd = float(est.std(ddof=1)) if len(est) > 1 else float("nan")
            rows.append({"flavor": f, "n": n, "R": sc.R,
                         "mean_abs_drift": float(np.mean(np.abs(tot))), "mean_drift": float(tot.mean()),
                         "mean_abs_terms": {k: float(np.mean([abs(t[k]) for t in terms])) for k in keys},
                         "mean_terms": {k: float(np.mean([t[k] for t in terms])) for k in keys},
                         "mc_bias": float(est.mean() - scen.theta), "mc_se": sd / np.sqrt(len(est))})
            reps_out[f"{f}|{n}"] = tot.tolist()
    slopes = {}
    if len(sc.n) > 1:
        for f in ("DR", "MR"):
            ys = [r["mean_abs_drift"] for r in rows if r["flavor"] == f]
            slopes[f] = loglog_slope(sc.n, ys) if min(ys) > 0 else float("nan")
    return DriftReport(sc.to_dict(), scen.theta, rows, slopes, reps_out)
