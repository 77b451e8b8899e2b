"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_cmc_figure(mean_curves: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, curve in sorted(mean_curves.items()):
        ranks = np.arange(1, curve.rates.size + 1)
        ax.plot(ranks, 100.0 * curve.rates, marker=".", label=method)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate (%)")
    ax.set_ylim(0, 102)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(matrix: np.ndarray, path: Path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    im = ax.imshow(matrix, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("gallery patch (row-first order)")
    ax.set_ylabel("probe patch (row-first order)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trace_figure(iterations, objectives, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(iterations, objectives, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean rank of correct match")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
