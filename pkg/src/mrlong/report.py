"""Estimator output record shared by every estimator and the command line."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

SCHEMA_VERSION = 1


class EstimatorError(RuntimeError):
    """An estimator step failed; ``where`` names the timepoint (and inner index)."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def jsonable(x: Any) -> Any:
    """Convert numpy containers and scalars to plain JSON types."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


@dataclass
class EstimateReport:
    """Point estimate with its diagnostics.

    ``details`` holds in-memory objects (fitted functions, per-subject
    arrays) for identity checks; it is not serialized and does not take part
    in equality.
    """

    estimator: str
    estimate: float
    per_split: list | None = None
    bootstrap_se: float | None = None
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    schema_version: int = SCHEMA_VERSION
    details: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("details")
        return jsonable(d)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {version}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))
