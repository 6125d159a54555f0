"""Figure rendering for the CLI report paths.

Every function writes a PNG next to the delimited output it
illustrates; the CSV stays the canonical artifact and the figure is a
convenience.  The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_QKV_LABELS = ("Q", "K", "V")


def loss_curves(rows, path):
    """Reconstruction / contrastive / total loss over iterations."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    its = [r["iter"] for r in rows]
    for key, color in (("l_rec", "tab:blue"), ("l_rcl", "tab:orange"),
                       ("l_total", "tab:green")):
        ax.plot(its, [r[key] for r in rows], label=key, linewidth=0.8,
                color=color, alpha=0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, linewidth=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def similarity_heatmaps(grids, path):
    """One annotated 3x3 heatmap per layer/branch similarity grid."""
    n_rows = max(1, (len(grids) + 1) // 2)
    fig, axes = plt.subplots(n_rows, 2, figsize=(5.6, 2.5 * n_rows),
                             squeeze=False)
    flat = axes.ravel()
    im = None
    for ax, g in zip(flat, grids):
        im = ax.imshow(g.matrix, vmin=0.0, vmax=1.0, cmap="viridis")
        for (i, j), val in np.ndenumerate(g.matrix):
            ax.text(j, i, f"{val:.2f}", ha="center", va="center",
                    color="white" if val < 0.6 else "black", fontsize=8)
        ax.set_xticks(range(3), _QKV_LABELS)
        ax.set_yticks(range(3), _QKV_LABELS)
        ax.set_title(f"layer {g.layer} / {g.branch} (r={g.rank})", fontsize=9)
    for ax in flat[len(grids):]:
        ax.axis("off")
    if im is not None:
        fig.colorbar(im, ax=axes, shrink=0.7, label="subspace similarity")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def map_figure(maps, path, title=""):
    """Render (f, h, w) maps as a frame strip, or a single (h, w) map."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None, ...]
    f = maps.shape[0]
    fig, axes = plt.subplots(1, f, figsize=(1.9 * f, 2.4), squeeze=False)
    lo, hi = float(maps.min()), float(maps.max())
    if hi <= lo:
        hi = lo + 1.0
    for i, ax in enumerate(axes[0]):
        ax.imshow(maps[i], vmin=lo, vmax=hi, cmap="magma")
        ax.set_xticks([])
        ax.set_yticks([])
        if f > 1:
            ax.set_title(f"f{i}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def video_strip(video, path, title=""):
    """All frames of an (F, H, W, C) video side by side, gray scale."""
    video = np.asarray(video, dtype=np.float64)
    frames = video[..., 0] if video.ndim == 4 else video
    f = frames.shape[0]
    fig, axes = plt.subplots(1, f, figsize=(1.6 * f, 2.1), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.imshow(frames[i], vmin=0.0, vmax=1.0, cmap="gray")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(f"f{i}", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
