"""Command line front end: ``estimate``, ``verify``, ``simulate`` and ``drift``.

Every command is a deterministic function of its config file and
``--seed``.  Reports are written as JSON, tables as CSV, and a PNG figure
accompanies each table.  Exit status is 0 on success, 1 when an invariant
fails (an identity check, a leakage assertion, a malformed law table) and
2 for invalid input.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .catalog import CATALOG, UnknownEstimatorError
from .crossfit import ESTIMATORS as CF_ESTIMATORS, LeakageError, SeriesLearnerConfig, algorithm6, \
    multi_layer, two_layer
from .discrete_law import load_fixture, sample
from .expr import ExpressionError
from .ice import IceModelSet
from .propensity import PropensityModel, fit_propensities
from .report import EstimateReport, EstimatorError, jsonable
from .simulation import CROSSFIT_ESTIMATORS, FAMILIES, ScenarioConfig, _learner_from, drift_rate_study, \
    robustness_matrix, run_mc
from .trajectory import ContractError, Dataset, DatasetError, ProblemSpec, load_dataset

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT = 0, 1, 2
KNOWN_ESTIMATORS = tuple(CATALOG) + tuple(CROSSFIT_ESTIMATORS)
RUN_FIELDS = {"problem", "data", "estimators", "outcome_model", "treatment_model", "learner", "splits", "seed"}


class ConfigError(ValueError):
    """Invalid config; ``path`` locates the offending field (``estimators[1].id``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvariantFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run config


@dataclass
class EstimatorRequest:
    id: str
    options: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    """Validated ``estimate`` config.

    Fields mirror the JSON: ``problem`` (K, treatment spaces, block sizes,
    ``psi`` expression, regime), ``data`` (one of ``path``, ``fixture`` or
    ``scenario``), ``estimators`` (ids or ``{"id": ..., options}``),
    working models for the catalog estimators, ``learner`` and ``splits``
    for the cross-fit estimators, and ``seed``.
    """

    problem: ProblemSpec | None
    data: dict
    estimators: list
    outcome_model: IceModelSet | None = None
    treatment_model: PropensityModel | None = None
    learner: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Any, base_dir=".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        extra = sorted(set(d) - RUN_FIELDS)
        if extra:
            raise ConfigError("<root>", f"unknown field(s) {extra}; expected some of {sorted(RUN_FIELDS)}")
        base_dir = Path(base_dir)
        seed = _int(d.get("seed", 0), "seed", lo=0)
        data = _data_section(d.get("data"), base_dir)
        problem = _problem(d["problem"], "problem") if "problem" in d else None
        if problem is None and "path" in data:
            raise ConfigError("problem", "required when data.path names a CSV file")
        estimators = _estimators(d.get("estimators"))
        cfg = cls(problem, data, estimators, seed=seed, base_dir=base_dir, raw=d)
        catalog_ids = [e.id for e in estimators if e.id in CATALOG]
        cf_ids = [e.id for e in estimators if e.id in CROSSFIT_ESTIMATORS]
        if catalog_ids:
            for key in ("outcome_model", "treatment_model"):
                if key not in d:
                    raise ConfigError(key, f"required by estimator {catalog_ids[0]!r}")
            cfg.outcome_model = _guard("outcome_model", lambda: IceModelSet.from_config(d["outcome_model"]))
            cfg.treatment_model = _guard("treatment_model", lambda: PropensityModel.from_config(d["treatment_model"]))
        for i, e in enumerate(estimators):
            if e.id == "reg":
                if e.options.get("nested") is not True:
                    raise ConfigError(f"estimators[{i}].nested", "estimator 'reg' requires \"nested\": true "
                                      "(each outcome basis a sub-vector of the next, with a constant)")
                problem_text = cfg.outcome_model.nesting_problem()
                if problem_text:
                    raise ConfigError("outcome_model.bases", problem_text)
            if "bootstrap" in e.options:
                _int(e.options["bootstrap"], f"estimators[{i}].bootstrap", lo=0)
                if e.id not in CATALOG:
                    raise ConfigError(f"estimators[{i}].bootstrap", "only catalog estimators are bootstrapped")
        if cf_ids:
            cfg.learner = _learner_section(d.get("learner", {}), data)
            cfg.splits = _splits_section(d.get("splits", {}))
        return cfg

    def spec_for(self, ds_spec: ProblemSpec | None) -> ProblemSpec:
        return self.problem if self.problem is not None else ds_spec

    def check_models(self, spec: ProblemSpec) -> None:
        if self.outcome_model is not None:
            _guard("outcome_model.bases", lambda: self.outcome_model.check(spec))
        if self.treatment_model is not None:
            _guard("treatment_model.bases", lambda: self.treatment_model.check(spec))


def _guard(path: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}", "required") from None
    except (ContractError, ExpressionError, ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _int(v, path: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(path, f"must be >= {lo}, got {v}")
    return v


def _problem(d, path: str) -> ProblemSpec:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    for key in ("K", "treatment_spaces", "l_dims", "psi", "regime"):
        if key not in d:
            raise ConfigError(f"{path}.{key}", "required")
    _int(d["K"], f"{path}.K", lo=1)
    if not isinstance(d["psi"], str):
        raise ConfigError(f"{path}.psi", "expected an expression string")
    return _guard(path, lambda: ProblemSpec.from_config(d))


def _data_section(d, base_dir: Path) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("data", "required object with one of 'path', 'fixture' or 'scenario'")
    sources = [k for k in ("path", "fixture", "scenario") if k in d]
    if len(sources) != 1:
        raise ConfigError("data", f"give exactly one of 'path', 'fixture', 'scenario' (got {sources or 'none'})")
    out = dict(d)
    if "path" in d:
        p = Path(d["path"])
        p = p if p.is_absolute() else base_dir / p
        if not p.exists():
            raise ConfigError("data.path", f"file not found: {p}")
        out["path"] = p
        return out
    _int(d.get("n"), "data.n", lo=1)
    if "fixture" in d:
        if not isinstance(d["fixture"], str) or not d["fixture"]:
            raise ConfigError("data.fixture", "expected a non-empty fixture id")
    elif d["scenario"] not in FAMILIES:
        raise ConfigError("data.scenario", f"unknown family {d['scenario']!r}; available: {', '.join(FAMILIES)}")
    if "params" in d and not isinstance(d["params"], dict):
        raise ConfigError("data.params", "expected an object")
    return out


def _estimators(d) -> list:
    if not isinstance(d, list) or not d:
        raise ConfigError("estimators", "required non-empty list")
    out = []
    for i, item in enumerate(d):
        if isinstance(item, str):
            item = {"id": item}
        if not isinstance(item, dict) or "id" not in item:
            raise ConfigError(f"estimators[{i}]", "expected an id string or an object with 'id'")
        eid = item["id"]
        if eid not in KNOWN_ESTIMATORS:
            raise ConfigError(f"estimators[{i}].id", str(UnknownEstimatorError(eid, KNOWN_ESTIMATORS)))
        out.append(EstimatorRequest(eid, {k: v for k, v in item.items() if k != "id"}))
    return out


def _learner_section(d, data: dict) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("learner", "expected an object")
    out = dict(d)
    for key in ("eta", "h"):
        v = d.get(key, {})
        if v == "oracle":
            if "path" in data:
                raise ConfigError(f"learner.{key}", "'oracle' needs a fixture or scenario data source")
            continue
        out[key] = _guard(f"learner.{key}", lambda: SeriesLearnerConfig.from_config(v).to_config())
    if d.get("link", "identity") not in ("identity", "logit"):
        raise ConfigError("learner.link", f"expected 'identity' or 'logit', got {d.get('link')!r}")
    return out


def _splits_section(d) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("splits", "expected an object")
    U = _int(d.get("U", 5), "splits.U", lo=2)
    out = {"U": U, "appendix_U": _int(d.get("appendix_U", U), "splits.appendix_U", lo=2)}
    if "seed" in d:
        out["seed"] = _int(d["seed"], "splits.seed", lo=0)
    return out


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return RunConfig.from_dict(d, path.parent)


# ---------------------------------------------------------------------------
# estimate


def _load_data(cfg: RunConfig, seed: int):
    """Dataset, the problem it is bound to, and the generating law when known."""
    d = cfg.data
    if "path" in d:
        try:
            ds = load_dataset(d["path"], cfg.problem)
        except DatasetError as exc:
            raise ConfigError("data.path", str(exc)) from None
        return ds, cfg.problem, None
    if "fixture" in d:
        try:
            law, spec = load_fixture(d["fixture"])
        except FileNotFoundError as exc:
            raise ConfigError("data.fixture", str(exc)) from None
    else:
        law, spec = _guard("data.params", lambda: FAMILIES[d["scenario"]].build(**d.get("params", {})))
    spec = cfg.spec_for(spec)
    return sample(law, spec, d["n"], seed), spec, law


def _bootstrap_se(ds: Dataset, spec, req: EstimatorRequest, cfg: RunConfig, seed: int) -> float | None:
    B = int(req.options.get("bootstrap", 0))
    if B < 2:
        return None
    rng = np.random.default_rng([seed, 2])
    vals = []
    for _ in range(B):
        boot = ds.subset(rng.integers(0, ds.n, ds.n))
        try:
            pf = fit_propensities(boot, cfg.treatment_model, errors="warn")
            vals.append(CATALOG[req.id].run(boot, spec, cfg.outcome_model, pf).estimate)
        except Exception:
            continue
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else None


def run_estimate(cfg: RunConfig, seed: int | None = None) -> list[EstimateReport]:
    """Every requested estimator on the configured data, in request order."""
    seed = cfg.seed if seed is None else seed
    ds, spec, law = _load_data(cfg, seed)
    cfg.check_models(spec)
    reports: dict[str, EstimateReport] = {}
    wanted = [e.id for e in cfg.estimators]
    if any(e in CATALOG for e in wanted):
        pf = fit_propensities(ds, cfg.treatment_model, errors="warn")
        for req in cfg.estimators:
            if req.id in CATALOG:
                rep = CATALOG[req.id].run(ds, spec, cfg.outcome_model, pf)
                rep.bootstrap_se = _bootstrap_se(ds, spec, req, cfg, seed)
                reports[req.id] = rep
    cf = [e for e in wanted if e in CROSSFIT_ESTIMATORS]
    if cf:
        le = _learner_from(cfg.learner.get("eta"), law, spec)
        lh = _learner_from(cfg.learner.get("h"), law, spec)
        split_seed = cfg.splits.get("seed", seed)
        link = cfg.learner.get("link", "identity")
        six = [e for e in cf if e in CF_ESTIMATORS]
        if six:
            out = algorithm6(ds, spec, le, lh, link, cfg.splits["U"], split_seed,
                             extensions=any(e.endswith(("bang", "reg")) for e in six))
            reports.update({e: out[e] for e in six})
        if "mr_two_layer" in cf:
            reports["mr_two_layer"] = two_layer(ds, spec, le, lh, cfg.splits["appendix_U"], split_seed)
        if "mr_multi_layer" in cf:
            reports["mr_multi_layer"] = multi_layer(ds, spec, le, lh, cfg.splits["appendix_U"], split_seed)
    ordered = []
    for req in cfg.estimators:
        rep = reports[req.id]
        rep.estimator = req.id
        rep.seed = seed
        rep.config = jsonable({**rep.config, "request": {"id": req.id, **req.options},
                               "data": {k: str(v) for k, v in cfg.data.items()}, "n": ds.n})
        ordered.append(rep)
    return ordered


ESTIMATE_COLUMNS = ["estimator", "estimate", "bootstrap_se", "splits", "split_min", "split_max",
                    "truncated", "leakage_violations"]


def estimates_csv(reports: Sequence[EstimateReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ESTIMATE_COLUMNS)
    for r in reports:
        ps = r.per_split or []
        w.writerow([r.estimator, repr(float(r.estimate)), "" if r.bootstrap_se is None else repr(r.bootstrap_se),
                    len(ps), repr(min(ps)) if ps else "", repr(max(ps)) if ps else "",
                    r.diagnostics.get("truncated", ""), r.diagnostics.get("leakage_violations", "")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# output helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _table(rows: Sequence[dict], cols: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3e}" if v == v else "nan"
        return str(v)
    body = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _threads(args, default: int) -> int:
    t = args.threads if args.threads is not None else default
    if t < 1:
        raise ConfigError("--threads", "must be >= 1")
    return t


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    if not args.config:
        raise ConfigError("--config", "required")
    cfg = load_run_config(args.config)
    _threads(args, 1)
    reports = run_estimate(cfg, args.seed)
    out = _out_dir(args)
    for r in reports:
        _write(out / f"report_{r.estimator}.json", r.to_json(indent=1))
    _write(out / "estimates.csv", estimates_csv(reports))
    from .plots import plot_estimates
    plot_estimates(reports, out / "estimates.png")
    print(_table([{"estimator": r.estimator, "estimate": r.estimate} for r in reports], ["estimator", "estimate"]))
    leaks = [r.estimator for r in reports if r.diagnostics.get("leakage_violations")]
    if leaks:
        raise InvariantFailure(f"leakage violations reported by {leaks}")
    return EXIT_OK


VERIFY_COLUMNS = ["check", "max_error", "tol", "runs", "status", "note"]


def cmd_verify(args) -> int:
    from .verify import all_passed, run_fixture_suite

    fixture = args.fixture
    seeds = 50
    if args.config:
        d = json.loads(Path(args.config).read_text())
        fixture = d.get("fixture", fixture)
        seeds = _int(d.get("seeds", seeds), "seeds", lo=1)
    if fixture is None or not str(fixture).strip():
        raise ConfigError("fixture", "a fixture id or law file is required")
    try:
        checks = run_fixture_suite(fixture, seeds=seeds, seed=args.seed or 0)
    except FileNotFoundError as exc:
        raise ConfigError("fixture", str(exc)) from None
    except ContractError as exc:
        raise InvariantFailure(f"law {fixture!r} violates a table invariant: {exc}") from None
    rows = [c.row() for c in checks]
    print(_table(rows, VERIFY_COLUMNS))
    if args.out:
        out = _out_dir(args)
        buf = io.StringIO()
        w = csv.DictWriter(buf, VERIFY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "max_error": repr(r["max_error"])})
        _write(out / "verify.csv", buf.getvalue())
        _write(out / "verify.json", json.dumps({"fixture": fixture, "checks": jsonable(rows)},
                                               sort_keys=True, indent=1, allow_nan=True))
    failed = [c.name for c in checks if not c.passed]
    if not all_passed(checks):
        raise InvariantFailure(f"{len(failed)} identity check(s) failed: {failed}")
    return EXIT_OK


def _scenario_config(args) -> ScenarioConfig:
    if not args.config:
        raise ConfigError("--config", "required")
    try:
        d = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {args.config}") from None
    if args.seed is not None:
        d = {**d, "seed": args.seed}
    return _guard("scenario", lambda: ScenarioConfig.from_dict(d))


def cmd_simulate(args) -> int:
    sc = _scenario_config(args)
    threads = _threads(args, os.cpu_count() or 1)
    if not sc.patterns and any(e in CATALOG for e in sc.estimators):
        rep = robustness_matrix(sc, threads=threads)
    else:
        rep = run_mc(sc, threads=threads)
    out = _out_dir(args)
    _write(out / "mc_report.json", rep.to_json())
    _write(out / "mc_report.csv", rep.to_csv())
    from .plots import plot_bias
    plot_bias(rep.cells, out / "mc_bias.png")
    cols = ["estimator", "pattern", "n", "bias", "mc_se", "verdict"]
    if any("theory_consistent" in c for c in rep.cells):
        cols += ["theory_consistent", "agrees"]
    print(_table(rep.cells, cols))
    return EXIT_OK


def cmd_drift(args) -> int:
    sc = _scenario_config(args)
    threads = _threads(args, os.cpu_count() or 1)
    rep = drift_rate_study(sc, threads=threads)
    out = _out_dir(args)
    _write(out / "drift.json", rep.to_json())
    _write(out / "drift.csv", rep.to_csv())
    from .plots import plot_drift
    plot_drift(rep.rows, out / "drift.png")
    print(_table(rep.rows, ["flavor", "n", "R", "mean_abs_drift", "mean_drift"]))
    for f, s in sorted(rep.slopes.items()):
        print(f"log-log slope {f}: {s:.3f}")
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "verify": cmd_verify, "simulate": cmd_simulate, "drift": cmd_drift}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrlong", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"estimate": "run estimators on a dataset", "verify": "run the exact identity suite on a law",
             "simulate": "Monte Carlo study from a scenario file", "drift": "drift decay study from a scenario file"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config (run config or scenario file)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: all cores for simulate/drift, 1 otherwise)")
        p.add_argument("--out", default="out", help="output directory")
        if name == "verify":
            p.add_argument("fixture", nargs="?", help="shipped fixture id or path to a law JSON file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be a non-negative integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InvariantFailure, LeakageError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ContractError, EstimatorError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
