"""Report figures rendered straight to files (headless backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import Stack, Volume  # noqa: E402


def convergence_figure(rows: list[dict], path):
    """Loss components over training iterations, saved to path."""
    if not rows:
        raise ValueError("empty loss trace")
    it = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in (("loss_total", "total"),
                       ("loss_slice", "slice likelihood"),
                       ("loss_reg", "field regularizer"),
                       ("loss_bias", "bias gauge")):
        ax.plot(it, [r[key] for r in rows], label=label, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def _midplanes(vol: Volume):
    d = vol.data
    return (d[d.shape[0] // 2, :, :],
            d[:, d.shape[1] // 2, :],
            d[:, :, d.shape[2] // 2])


def comparison_figure(volumes: list[tuple[str, Volume]], path):
    """Tri-planar mid-slice montage, one row per named volume.

    Gray scaling is shared across rows (taken from the first volume) so
    intensity differences stay visible.
    """
    if not volumes:
        raise ValueError("no volumes to plot")
    ref = volumes[0][1].data
    vmin, vmax = float(ref.min()), float(ref.max())
    if vmax <= vmin:
        vmax = vmin + 1.0
    n = len(volumes)
    fig, axes = plt.subplots(n, 3, figsize=(9, 3 * n), squeeze=False)
    for r, (name, vol) in enumerate(volumes):
        for c, plane in enumerate(_midplanes(vol)):
            ax = axes[r][c]
            ax.imshow(plane.T, cmap="gray", vmin=vmin, vmax=vmax,
                      origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name, fontsize=9)
    for c, title in enumerate(("x mid-plane", "y mid-plane", "z mid-plane")):
        axes[0][c].set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def stack_montage(stack: Stack, path, max_slices: int = 12):
    """A few slices of one stack, masked region outlined by zeroing."""
    ns = stack.n_slices
    take = min(ns, max_slices)
    picks = np.unique(np.linspace(0, ns - 1, take).round().astype(int))
    cols = min(4, len(picks))
    rows = int(np.ceil(len(picks) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.6 * rows),
                             squeeze=False)
    vmax = float(stack.data.max()) or 1.0
    for ax in axes.flat:
        ax.axis("off")
    for ax, s in zip(axes.flat, picks):
        img = np.where(stack.mask[:, :, s], stack.data[:, :, s], 0.0)
        ax.imshow(img.T, cmap="gray", vmin=0.0, vmax=vmax, origin="lower")
        ax.set_title(f"slice {s}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
