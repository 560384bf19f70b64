"""PNG figures drawn from the same rows the CSV tables carry."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software/version stamp, so repeated runs write identical bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_estimates(reports: Sequence, path) -> Path:
    """Point estimate per estimator, with per-split values where present."""
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(reports), 3.4))
    for i, r in enumerate(reports):
        if r.per_split:
            ax.plot([i] * len(r.per_split), r.per_split, "o", color="0.7", ms=4, zorder=1)
        ax.plot([i], [r.estimate], "D", color="C0", ms=7, zorder=2)
        if r.bootstrap_se:
            ax.errorbar([i], [r.estimate], yerr=[2 * r.bootstrap_se], color="C0", capsize=3)
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([r.estimator for r in reports], rotation=45, ha="right")
    ax.set_ylabel("estimate")
    return _save(fig, path)


def plot_bias(cells: Sequence[dict], path, z: float = 2.0) -> Path:
    """Bias with a ``z`` Monte Carlo standard error band, one row per cell."""
    labels, bias, se, color = [], [], [], []
    for c in cells:
        labels.append(f"{c['estimator']} | {c['pattern']} | n={c['n']}")
        bias.append(np.nan if c.get("bias") is None else c["bias"])
        se.append(np.nan if c.get("mc_se") is None else c["mc_se"])
        if "theory_consistent" in c:
            color.append("C0" if c["theory_consistent"] else "C3")
        else:
            color.append("C0")
    y = np.arange(len(cells))[::-1]
    fig, ax = plt.subplots(figsize=(6.4, 0.8 + 0.22 * len(cells)))
    ax.axvline(0.0, color="0.5", lw=0.8)
    for yi, b, s, col in zip(y, bias, se, color):
        ax.errorbar([b], [yi], xerr=[z * s], fmt="o", color=col, ms=3, capsize=2)
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xlabel(f"bias (bars: {z:g} MC-SE)")
    return _save(fig, path)


def plot_drift(rows: Sequence[dict], path) -> Path:
    """Mean absolute drift against ``n`` on log-log axes, one line per flavor."""
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    for f in sorted({r["flavor"] for r in rows}):
        rs = sorted((r for r in rows if r["flavor"] == f), key=lambda r: r["n"])
        ax.loglog([r["n"] for r in rs], [r["mean_abs_drift"] for r in rs], "o-", label=f)
    ax.set_xlabel("n")
    ax.set_ylabel("mean |drift|")
    ax.legend(frameon=False)
    return _save(fig, path)
