"""Matplotlib rendering of run artifacts.

Figures are written next to the delimited/text outputs of a run. matplotlib
is imported lazily with the Agg backend so headless runs and figure-free
callers never touch a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def probability_figure(prob: np.ndarray, path: str | Path, title: str = "foreground probability") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3.2))
    im = ax.imshow(prob, vmin=0.0, vmax=1.0, cmap="viridis", interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def prediction_figure(pred: np.ndarray, gt: np.ndarray | None, path: str | Path) -> None:
    plt = _plt()
    panels = 1 if gt is None else 2
    fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.2), squeeze=False)
    axes[0, 0].imshow(pred, vmin=0, vmax=1, cmap="gray", interpolation="nearest")
    axes[0, 0].set_title("prediction")
    if gt is not None:
        axes[0, 1].imshow(gt, vmin=0, vmax=1, cmap="gray", interpolation="nearest")
        axes[0, 1].set_title("ground truth")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def best_match_figure(
    best: np.ndarray, support_height: int, support_width: int, path: str | Path
) -> None:
    """Support cells colored by position; query cells take their match's color."""
    plt = _plt()

    def position_colors(h, w):
        r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        rgb = np.stack(
            [r / max(h - 1, 1), c / max(w - 1, 1), 1.0 - 0.5 * (r / max(h - 1, 1))],
            axis=-1,
        )
        return rgb

    support_rgb = position_colors(support_height, support_width)
    qh, qw = best.shape
    query_rgb = np.full((qh, qw, 3), 0.35)
    flat = support_rgb.reshape(-1, 3)
    matched = best >= 0
    query_rgb[matched] = flat[best[matched]]

    fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.2))
    axes[0].imshow(support_rgb, interpolation="nearest")
    axes[0].set_title("support (position hue)")
    axes[1].imshow(query_rgb, interpolation="nearest")
    axes[1].set_title("query (matched hue)")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def suite_figure(rows: list[dict], path: str | Path) -> None:
    """Bar chart of mean FBIoU / mIoU per suite variant with stddev whiskers."""
    plt = _plt()
    variants = [r["variant"] for r in rows]
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(variants), 3.4))
    ax.bar(x - 0.2, [r["fbiou_mean"] for r in rows], 0.4,
           yerr=[r["fbiou_std"] for r in rows], capsize=3, label="FBIoU")
    ax.bar(x + 0.2, [r["miou_mean"] for r in rows], 0.4,
           yerr=[r["miou_std"] for r in rows], capsize=3, label="mIoU")
    ax.set_xticks(x)
    ax.set_xticklabels(variants)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
