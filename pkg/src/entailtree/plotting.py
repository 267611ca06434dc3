"""PNG figures for run reports: leaf-count breakdown and training curves.

Figures are written with fixed metadata so that identical inputs give
byte-identical files.
"""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path, stamp: str = "") -> None:
    meta = dict(_META)
    if stamp:
        meta["Description"] = stamp
    fig.savefig(path, format="png", dpi=100, metadata=meta)
    plt.close(fig)


def plot_breakdown(rows: Sequence, path, stamp: str = "") -> None:
    """Bar chart of overall AllCorrect rate per gold leaf-count bucket."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [str(r.bucket) for r in rows]
    rates = [r.rate for r in rows]
    bars = ax.bar(labels, rates, color="#4c72b0")
    for bar, r in zip(bars, rows):
        ax.annotate(f"n={r.count}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1.1)
    ax.set_xlabel("gold leaves")
    ax.set_ylabel("overall AllCorrect")
    ax.set_title("Accuracy by tree size")
    fig.tight_layout()
    _save(fig, path, stamp)


def plot_curves(curves: dict, path, stamp: str = "") -> None:
    """One panel per named loss curve (list of per-epoch values)."""
    names = [k for k, v in curves.items() if v]
    fig, axes = plt.subplots(1, max(1, len(names)), figsize=(4 * max(1, len(names)), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        ys = curves[name]
        ax.plot(range(1, len(ys) + 1), ys, marker="o", ms=3)
        ax.set_title(name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
    fig.tight_layout()
    _save(fig, path, stamp)
