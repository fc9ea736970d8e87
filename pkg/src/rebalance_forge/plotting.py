"""PNG figures for CLI reports.

Uses ``matplotlib.figure.Figure`` directly so nothing touches pyplot's global
state or needs a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def plot_confusion(normalized: np.ndarray, labels: Sequence[str], path: str | Path, title: str = "") -> Path:
    """Row-normalized confusion heatmap with the cell values printed in percent."""
    matrix = np.asarray(normalized, dtype=float)
    n = len(labels)
    fig = Figure(figsize=(1.2 * n + 2.0, 1.2 * n + 1.5))
    ax = fig.add_subplot()
    im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), labels, rotation=30, ha="right")
    ax.set_yticks(range(n), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            color = "white" if matrix[i, j] > 0.5 else "black"
            ax.text(j, i, f"{100 * matrix[i, j]:.1f}", ha="center", va="center", color=color, fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_convergence(history: Sequence[float], path: str | Path, title: str = "") -> Path:
    """Best-so-far fitness per epoch; log scale when every value is positive."""
    values = np.asarray(history, dtype=float)
    fig = Figure(figsize=(5.0, 3.2))
    ax = fig.add_subplot()
    ax.plot(np.arange(1, len(values) + 1), values, lw=1.2)
    finite = values[np.isfinite(values)]
    if finite.size and np.all(finite > 0):
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("best fitness")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_metric_comparison(summaries: dict[str, dict[str, tuple[float, float]]], path: str | Path) -> Path:
    """Grouped bars of mean metric per run, with population-STD error bars.

    ``summaries`` maps run name -> metric -> (mean, std).
    """
    runs = list(summaries)
    metrics = list(next(iter(summaries.values())))
    x = np.arange(len(metrics))
    width = 0.8 / len(runs)
    fig = Figure(figsize=(6.0, 3.2))
    ax = fig.add_subplot()
    for i, run in enumerate(runs):
        means = [summaries[run][m][0] for m in metrics]
        stds = [summaries[run][m][1] for m in metrics]
        ax.bar(x + (i - (len(runs) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=run)
    ax.set_xticks(x, metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, path)
