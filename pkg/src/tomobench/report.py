"""Figure rendering for benchmark reports and previews.

Every report directory gets, alongside the delimited output, a small set of
matplotlib figures: grouped mean ± std bars per metric, a montage of sample
reconstructions, and (for iterative solvers) convergence traces.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricSummary

_DPI = 150


def save_metric_bars(
    summaries: dict[tuple[str, str], MetricSummary],
    metric: str,
    path,
    tasks: Optional[Sequence[str]] = None,
    methods: Optional[Sequence[str]] = None,
) -> None:
    """Grouped bar chart of mean ± std for one metric (tasks on x, one bar per method)."""
    if tasks is None:
        tasks = sorted({t for t, _ in summaries})
    if methods is None:
        methods = sorted({m for _, m in summaries})
    x = np.arange(len(tasks))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(tasks), 3.2))
    for i, m in enumerate(methods):
        means, stds = [], []
        for t in tasks:
            s = summaries.get((t, m))
            mean = getattr(s, f"{metric}_mean") if s else math.nan
            std = getattr(s, f"{metric}_std") if s else 0.0
            means.append(np.nan if (s is None or math.isinf(mean)) else mean)
            stds.append(std)
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, means, width,
               yerr=stds, capsize=2, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(tasks, rotation=20, ha="right")
    ax.set_ylabel(metric.upper())
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_montage(images: dict[str, np.ndarray], path, cmap: str = "gray") -> None:
    """Labeled grid of images on a shared grayscale window."""
    n = len(images)
    if n == 0:
        return
    cols = min(n, 4)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.8 * rows),
                             squeeze=False)
    vals = np.concatenate([np.ravel(v) for v in images.values()])
    vmin, vmax = np.percentile(vals, [1, 99])
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (label, img) in zip(axes.ravel(), images.items()):
        ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_convergence(traces: dict[str, Sequence[float]], path) -> None:
    """Objective traces on a log axis."""
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for label, tr in traces.items():
        ax.semilogy(np.arange(len(tr)), tr, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_image_figure(values: np.ndarray, path, title: str = "") -> None:
    """Single-image preview figure with a colorbar."""
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(values, cmap="gray")
    if title:
        ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
