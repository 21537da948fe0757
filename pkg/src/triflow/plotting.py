"""Figures written next to the CSV/text reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flowio import colorize  # noqa: E402


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out")


def plot_bench(report, path) -> Path:
    """Bar chart of mean per-frame runtime with std whiskers, one bar per variant."""
    names = [r.variant for r in report.rows]
    means = [r.runtime_ms_mean for r in report.rows]
    stds = [r.runtime_ms_std for r in report.rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar(range(len(names)), means, yerr=stds, color="0.55", edgecolor="0.2", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("time per frame, ms")
    h, w = report.resolution
    ax.set_title(f"{h}x{w}, correlation at 1/{report.scale}")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(log, path) -> Path:
    steps = [r[0] for r in log.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(steps, log.losses, lw=0.8, color="k")
    ax1.set_xlabel("step")
    ax1.set_ylabel("sequence loss")
    ax2.plot(steps, log.epes, lw=0.8, color="tab:blue")
    ax2.set_xlabel("step")
    ax2.set_ylabel("EPE, px")
    for ax in (ax1, ax2):
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_histogram(hist, path, crop: int | None = 64) -> Path:
    """Log-count image of a motion histogram, optionally cropped around zero motion."""
    img = hist.display()
    hh, hw = hist.config.half_height, hist.config.half_width
    extent = [-hw, hw, hh, -hh]
    if crop is not None:
        img = img[hh - crop : hh + crop, hw - crop : hw + crop]
        extent = [-crop, crop, crop, -crop]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(img, cmap="magma", extent=extent, interpolation="nearest")
    ax.set_xlabel("v (second flow component), px")
    ax.set_ylabel("u (first flow component), px")
    fig.colorbar(im, ax=ax, label="log(1 + count)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_flow_png(flow: np.ndarray, path, max_norm: float | None = None) -> Path:
    from .flowio import write_image

    write_image(path, colorize(flow, max_norm))
    return Path(path)
