"""Static figures written to PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .topology import TreeTopology  # noqa: E402


def plot_training_curves(rows: list, path: str | Path) -> None:
    """ELBO and KL weight per epoch across all phases, phase boundaries marked."""
    if not rows:
        return
    elbo = [r["elbo"] for r in rows]
    beta = [r["beta"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(elbo, lw=1.2, color="tab:blue")
    ax.set_xlabel("epoch (all phases)")
    ax.set_ylabel("train ELBO")
    start = 0
    for i in range(1, len(rows) + 1):
        if i == len(rows) or rows[i]["phase"] != rows[start]["phase"]:
            ax.axvline(start, color="0.85", lw=0.8, zorder=0)
            ax.text(start, 1.01, rows[start]["phase"], transform=ax.get_xaxis_transform(),
                    fontsize=6, rotation=45)
            start = i
    lo, hi = np.percentile(elbo, [5, 100])
    ax.set_ylim(lo - 0.05 * (hi - lo + 1), hi + 0.05 * (hi - lo + 1))
    twin = ax.twinx()
    twin.plot(beta, lw=0.8, color="tab:orange", alpha=0.6)
    twin.set_ylabel("KL weight", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _layout(topo: TreeTopology) -> dict:
    pos, cursor = {}, [0]

    def walk(n):
        if n in topo.leaves:
            pos[n] = (cursor[0], -topo.depth[n])
            cursor[0] += 1
        else:
            l, r = topo.children[n]
            walk(l)
            walk(r)
            pos[n] = ((pos[l][0] + pos[r][0]) / 2, -topo.depth[n])

    walk(topo.root)
    return pos


def plot_tree(topo: TreeTopology, path: str | Path, leaf_labels: Optional[dict] = None,
              leaf_images: Optional[dict] = None) -> None:
    """Dendrogram of the learned tree; leaves annotated and optionally shown with an image."""
    pos = _layout(topo)
    n_leaves = len(topo.leaves)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * n_leaves), 1.2 * (topo.height + 2)))
    for n, (l, r) in topo.children.items():
        for c in (l, r):
            ax.plot([pos[n][0], pos[c][0]], [pos[n][1], pos[c][1]], color="0.4", lw=1)
    for n, (x, y) in pos.items():
        ax.scatter([x], [y], s=160, color="tab:green" if n in topo.leaves else "tab:blue", zorder=3)
        ax.text(x, y, str(n), ha="center", va="center", fontsize=7, color="white", zorder=4)
        if n in topo.leaves and leaf_labels and n in leaf_labels:
            ax.text(x, y - 0.35, leaf_labels[n], ha="center", va="top", fontsize=7)
        if n in topo.leaves and leaf_images and n in leaf_images:
            img = np.asarray(leaf_images[n])
            ext = [x - 0.4, x + 0.4, y - 1.5, y - 0.7]
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, extent=ext, vmin=0, vmax=1)
    ax.set_xlim(-0.7, n_leaves - 0.3)
    ax.set_ylim(-topo.height - 1.7, 0.5)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _to_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = np.moveaxis(img, 0, -1)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    return np.clip(img, 0, 1)


def plot_image_grid(images, path: str | Path, row_titles=None, col_titles=None) -> None:
    """``images`` is a nested list [rows][cols] of CHW or HW arrays."""
    rows, cols = len(images), len(images[0])
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.1 * rows), squeeze=False)
    for i in range(rows):
        for j in range(cols):
            ax = axes[i][j]
            img = _to_hwc(images[i][j])
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if col_titles and i == 0:
                ax.set_title(str(col_titles[j]), fontsize=7)
            if row_titles and j == 0:
                ax.set_ylabel(str(row_titles[i]), fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
