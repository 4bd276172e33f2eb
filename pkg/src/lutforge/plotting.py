"""Figures for the ``pareto`` report."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .estimator import LUT_FIT_EXPONENT  # noqa: E402


def _to_luts(ebops):
    return np.power(np.maximum(ebops, 0.0), LUT_FIT_EXPONENT)


def _from_luts(luts):
    return np.power(np.maximum(luts, 0.0), 1.0 / LUT_FIT_EXPONENT)


def plot_pareto(points, history, path, title: str = "EBOPs vs validation metric") -> Path:
    """Scatter every epoch, highlight the Pareto front, and save to ``path`` (PNG)."""
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    if history:
        ax.scatter([h["ebops"] for h in history], [h["val_metric"] for h in history],
                   s=12, c="0.7", label="epochs")
    if points:
        ax.step([p.ebops for p in points], [p.val_metric for p in points], where="post",
                color="C0", lw=1.2)
        ax.scatter([p.ebops for p in points], [p.val_metric for p in points], s=24, color="C0",
                   label="Pareto front", zorder=3)
        positive = [p.ebops for p in points if p.ebops > 0]
        if positive and max(positive) / min(positive) > 20:
            ax.set_xscale("log")
        top = ax.secondary_xaxis("top", functions=(_to_luts, _from_luts))
        top.set_xlabel("estimated LUTs")
    ax.set_xlabel("EBOPs")
    ax.set_ylabel("validation metric")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path
