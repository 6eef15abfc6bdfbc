"""Convergence figures written next to the delimited report files."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}

COLORS = {"bo_nei": "#1f5fa8", "random": "#b8472f", "trial": "#1f5fa8"}
LABELS = {"bo_nei": "BO (NEI)", "random": "random search"}
# no timestamp or version in the file, so reruns give identical bytes
_META = {"Software": None}


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_benchmark(report, path, reference: float | None = None) -> Path:
    """Median best-so-far with the interquartile band, one line per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in report.runs:
            s = report.summary(m)
            x = np.arange(1, report.budget + 1)
            ax.plot(x, s["median"], color=COLORS.get(m), label=LABELS.get(m, m))
            ax.fill_between(x, s["q25"], s["q75"], color=COLORS.get(m), alpha=0.18, linewidth=0)
        if reference is not None:
            ax.axhline(reference, color="0.4", linestyle="--", linewidth=0.9, label="reference")
        title = f"{report.suite}: {len(report.seeds)} seeds"
        if not math.isnan(report.wilcoxon_p):
            title += f", Wilcoxon p = {report.wilcoxon_p:.3g}"
        ax.set_title(title)
        ax.set_xlabel("completed trials")
        ax.set_ylabel("best feasible value")
        ax.legend(loc="lower right")
        return save(fig, path)


def plot_history(trace, path, title: str = "") -> Path:
    """Observed values and best-so-far for one run.

    `trace` is a list of ``(index, observed_or_None, best_or_None)``.
    """
    idx = np.array([t[0] for t in trace], dtype=float)
    obs = np.array([np.nan if t[1] is None else t[1] for t in trace], dtype=float)
    best = np.array([np.nan if t[2] is None else t[2] for t in trace], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(idx, obs, "o", ms=3, color="0.55", label="feasible observation")
        ax.step(idx, best, where="post", color=COLORS["trial"], label="best so far")
        ax.set_xlabel("completed trials")
        ax.set_ylabel("objective")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return save(fig, path)
