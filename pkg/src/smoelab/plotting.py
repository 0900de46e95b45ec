"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#377eb8", "#e41a1c", "#4daf4a", "#984ea3", "#ff7f00", "#a65628"]

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def size(scale=1.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    w = 6.0 * scale
    return (w, w * golden)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return path


def training_curves(rows: list[dict], path) -> Path:
    """BPC against step for the train and valid rows of a metrics CSV."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        for i, split in enumerate(("train", "valid")):
            pts = [(int(r["step"]), float(r["bpc"])) for r in rows if r["split"] == split]
            if not pts:
                continue
            s, b = zip(*pts)
            if split == "train" and len(b) > 50:
                w = max(1, len(b) // 50)
                b = np.convolve(b, np.ones(w) / w, mode="valid")
                s = s[w - 1:]
            ax.plot(s, b, color=COLORS[i], label=split, marker="o" if split == "valid" else None, ms=3)
        ax.set_xlabel("step")
        ax.set_ylabel("bits per character")
        ax.legend()
        return _save(fig, path)


def rate_curves(curves, rows: list[dict], path) -> Path:
    """Log-log scatter of per-trial losses, medians and the fitted line per discrepancy."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(curves), figsize=(5.0 * len(curves), 3.8))
        axes = np.atleast_1d(axes)
        for ax, c, col in zip(axes, curves, COLORS):
            pts = [(r["n"], r[c.label]) for r in rows if r.get("ok")]
            if pts:
                n, v = zip(*pts)
                ax.loglog(n, v, ".", color=col, alpha=0.25)
            ax.loglog(c.n, c.median, "o", color=col, mfc="white", label="median")
            ax.loglog(c.n, np.exp(c.intercept) * c.n ** c.slope, "k--", lw=1,
                      label=f"slope {c.slope:.2f}")
            ref = c.median[0] * (c.n / c.n[0]) ** -0.5
            ax.loglog(c.n, ref, ":", color="grey", lw=1, label="n^-1/2")
            ax.set_xlabel("n")
            ax.set_ylabel(c.label)
            ax.legend()
        return _save(fig, path)


def entropy_table(table: dict[str, dict[str, float]], path) -> Path:
    """Grouped bars of per-router entropy, one group per router, one bar per method."""
    methods = list(table)
    routers = sorted({r for m in table.values() for r in m}, key=lambda r: (r == "average", r))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(1.2))
        width = 0.8 / max(1, len(methods))
        x = np.arange(len(routers))
        for i, m in enumerate(methods):
            ax.bar(x + i * width, [table[m].get(r, np.nan) for r in routers], width, label=m,
                   color=COLORS[i % len(COLORS)])
        ax.set_xticks(x + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(routers)
        ax.set_ylabel("mean routing entropy (nats)")
        ax.legend()
        return _save(fig, path)
