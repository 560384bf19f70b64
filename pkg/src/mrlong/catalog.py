"""Registry of the parametric estimators by id.

Each entry records how to call the estimator and which working models it
needs to be consistent, as a rule over per-timepoint correctness flags
(``h[k]``: treatment model at ``k`` correct, ``g[k]``: outcome model at
``k`` correct).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .ice import IceModelSet, estimate_bang, estimate_greedy, estimate_ice, estimate_ipw
from .mr import estimate_dr_plugin, estimate_mr, estimate_mr_greedy, estimate_reg_mr
from .propensity import PropensityFit
from .report import EstimateReport
from .trajectory import Dataset, ProblemSpec


def all_h(h: Sequence[bool], g: Sequence[bool]) -> bool:
    return all(h)


def all_g(h: Sequence[bool], g: Sequence[bool]) -> bool:
    return all(g)


def nested_prefix(h: Sequence[bool], g: Sequence[bool]) -> bool:
    """Some split point ``j`` has every treatment model before ``j`` and every outcome model from ``j`` on right."""
    K = len(h)
    return any(all(h[:j]) and all(g[j:]) for j in range(K + 1))


def per_timepoint(h: Sequence[bool], g: Sequence[bool]) -> bool:
    """At every timepoint the treatment or the outcome model is right."""
    return all(a or b for a, b in zip(h, g))


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    run: Callable[[Dataset, ProblemSpec, IceModelSet, PropensityFit], EstimateReport]
    consistent_when: Callable[[Sequence[bool], Sequence[bool]], bool]
    needs_nesting: bool = False
    description: str = ""


CATALOG: dict[str, CatalogEntry] = {e.name: e for e in [
    CatalogEntry("ipw", lambda ds, sp, m, pf: estimate_ipw(ds, sp, pf), all_h,
                 description="inverse probability weighting"),
    CatalogEntry("ice", lambda ds, sp, m, pf: estimate_ice(ds, sp, m), all_g,
                 description="iterated conditional expectation"),
    CatalogEntry("bang", lambda ds, sp, m, pf: estimate_bang(ds, sp, m, pf), nested_prefix,
                 description="joint clever-covariate iterated regression"),
    CatalogEntry("greedy", lambda ds, sp, m, pf: estimate_greedy(ds, sp, m, pf), nested_prefix,
                 description="greedy clever-covariate iterated regression"),
    CatalogEntry("dr", lambda ds, sp, m, pf: estimate_dr_plugin(ds, sp, m, pf), nested_prefix,
                 description="Q_1 with iterated-regression outcome models"),
    CatalogEntry("mr", lambda ds, sp, m, pf: estimate_mr(ds, sp, m, pf), per_timepoint,
                 description="iterated regression of the Q pseudo-outcome"),
    CatalogEntry("reg", lambda ds, sp, m, pf: estimate_reg_mr(ds, sp, m, pf), per_timepoint,
                 needs_nesting=True, description="inverse-pi-hat weighted regression, nested bases"),
    CatalogEntry("mr_greedy", lambda ds, sp, m, pf: estimate_mr_greedy(ds, sp, m, pf), per_timepoint,
                 description="greedy multiply robust iterated regression"),
]}


class UnknownEstimatorError(KeyError):
    def __init__(self, name: str, known: Sequence[str]):
        super().__init__(f"unknown estimator {name!r}; available: {', '.join(known)}")
        self.name = name

    def __str__(self) -> str:
        return self.args[0]


def lookup(name: str) -> CatalogEntry:
    if name not in CATALOG:
        raise UnknownEstimatorError(name, sorted(CATALOG))
    return CATALOG[name]
