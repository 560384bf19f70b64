"""Regenerate the shipped law fixtures under src/mrlong/fixtures/."""
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from mrlong.discrete_law import DiscreteLaw
from mrlong.trajectory import ProblemSpec, RegimeSpec

OUT = Path(__file__).resolve().parents[1] / "src" / "mrlong" / "fixtures"


def bernoulli(p):
    p = np.asarray(p, dtype=float)
    return np.stack([1 - p, p], axis=-1)


def k1_basic():
    g0 = np.array([0.5, 0.5])
    l1 = np.array([0.0, 1.0])[:, None]
    a1 = np.array([0, 1])[None, :]
    h1 = bernoulli(0.4 + 0.2 * l1[:, 0])
    g1 = bernoulli(0.2 + 0.5 * a1 + 0.1 * l1)
    law = DiscreteLaw([[0, 1], [0, 1]], [[0, 1]], [g0, g1], [h1])
    spec = ProblemSpec(1, [[0, 1]], [1, 1], "L2", RegimeSpec.static([1]))
    return law, spec


def k2_dropout():
    # A_k = 1 means the subject is still observed; post-dropout blocks hold 0
    s1 = np.array([0.0, 1.0, 2.0])
    g0 = np.array([0.3, 0.4, 0.3])
    h1 = bernoulli(expit(1.0 - 0.3 * s1))
    g1 = np.zeros((3, 2, 3))
    g1[:, 0, 0] = 1.0
    for i, l1 in enumerate(s1):
        w = np.exp(np.array([0.0, 0.4, 0.2]) + 0.3 * l1 * np.array([0, 1, 2]))
        g1[i, 1] = w / w.sum()
    h2 = np.zeros((3, 2, 3, 2))
    h2[:, 0, :, 0] = 1.0
    for i, l1 in enumerate(s1):
        for j, l2 in enumerate(s1):
            p = expit(0.8 + 0.4 * l2 - 0.3 * l1)
            h2[i, 1, j] = [1 - p, p]
    g2 = np.zeros((3, 2, 3, 2, 2))
    g2[..., 0, 0] = 1.0
    for i, l1 in enumerate(s1):
        for j, l2 in enumerate(s1):
            p = expit(-0.6 + 0.4 * l1 + 0.5 * l2 - 0.2 * l1 * l2)
            g2[i, :, j, 1] = [1 - p, p]
    law = DiscreteLaw([s1, s1, [0, 1]], [[0, 1], [0, 1]], [g0, g1, g2], [h1, h2])
    spec = ProblemSpec(2, [[0, 1], [0, 1]], [1, 1, 1], "L3", RegimeSpec.static([1, 1]))
    return law, spec


def k3_general():
    rng = np.random.default_rng(20240611)
    sizes = [3, 2, 3, 2]
    shape = []
    for k in range(3):
        shape += [sizes[k], 2]
    shape.append(sizes[3])
    g, h = [], []
    for k in range(4):
        pre = tuple(shape[:2 * k])
        g.append(rng.dirichlet(np.full(sizes[k], 3.0), size=pre) if pre else rng.dirichlet(np.full(sizes[k], 3.0)))
        if k < 3:
            pre_h = tuple(shape[:2 * k + 1])
            p = rng.uniform(0.15, 0.85, size=pre_h)
            h.append(bernoulli(p))
    supports = [[0, 1, 2], [0, 1], [0, 1, 2], [0, 1]]
    law = DiscreteLaw(supports, [[0, 1]] * 3, g, h)
    regime = RegimeSpec.mixed([
        RegimeSpec.stochastic([{1: "expit(0.3 + 0.5*L1)", 0: "1 - expit(0.3 + 0.5*L1)"}]),
        RegimeSpec.dynamic(["ind(L2 + A1 > 0)"]),
        RegimeSpec.stochastic([{1: "0.7", 0: "0.3"}]),
    ])
    spec = ProblemSpec(3, [[0, 1]] * 3, [1, 1, 1, 1], "L4 + 0.5*L3", regime)
    return law, spec


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, build in [("k1_basic", k1_basic), ("k2_dropout", k2_dropout), ("k3_general", k3_general)]:
        law, spec = build()
        law.bind(spec).check_positivity()
        obj = {"problem": spec.to_config(), "law": law.to_json()}
        (OUT / f"{name}.json").write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        print(name, law.shape)


if __name__ == "__main__":
    main()
