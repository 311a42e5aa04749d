"""Matplotlib figures for reconstructions, samples, loss curves and metric reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import LossLog  # noqa: E402

PANELS = ("input", "reconstruction", "background", "objects", "masks", "depth")


def _mask_image(ids: np.ndarray) -> np.ndarray:
    cmap = plt.get_cmap("tab10")
    img = np.zeros((*ids.shape, 3))
    for i in np.unique(ids):
        if i > 0:
            img[ids == i] = cmap((i - 1) % 10)[:3]
    return img


def save_panels(path, pred, target: np.ndarray | None = None, title: str | None = None) -> Path:
    """One row per frame: input, reconstruction, background, objects, instance masks and depth."""
    F = len(pred.rgb)
    columns = [c for c in PANELS if c != "input" or target is not None]
    fig, axes = plt.subplots(F, len(columns), figsize=(1.6 * len(columns), 1.6 * F), squeeze=False)
    dmax = float(np.percentile(pred.depth, 99)) or 1.0
    for f in range(F):
        images = {
            "input": None if target is None else target[f],
            "reconstruction": pred.rgb[f],
            "background": pred.background[f],
            "objects": pred.objects[f],
            "masks": _mask_image(pred.masks[f]),
            "depth": pred.depth[f],
        }
        for j, col in enumerate(columns):
            ax = axes[f, j]
            if col == "depth":
                ax.imshow(images[col], cmap="viridis", vmin=0, vmax=dmax)
            else:
                ax.imshow(np.clip(images[col], 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if f == 0:
                ax.set_title(col, fontsize=7)
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(csv_path, out_path, terms: Sequence[str] = ("total", "nll", "kl")) -> Path:
    rows = LossLog.read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = [r["step"] for r in rows]
    for t in terms:
        vals = [r[t] for r in rows]
        if any(math.isfinite(v) and v > 0 for v in vals):
            ax.plot(steps, vals, label=t)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_metrics(summary: dict[str, float], out_path) -> Path:
    """Bar chart of the summary metrics (undefined metrics are left out)."""
    keys = [k for k, v in summary.items() if v is not None and math.isfinite(v) and k != "psnr"]
    fig, ax = plt.subplots(figsize=(5, 2.5))
    ax.bar(keys, [summary[k] for k in keys], color="tab:blue")
    ax.set_ylim(0, max(1.0, *(summary[k] for k in keys)) if keys else 1.0)
    ax.tick_params(axis="x", labelsize=7, rotation=30)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
