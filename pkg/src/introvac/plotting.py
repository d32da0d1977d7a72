"""Figure output: lossless image montages and matplotlib report figures.

Montages are written directly as PNG (no resampling) so pixel values survive
bit-exactly; report figures (loss curves, FID per epoch, sample panels) go
through matplotlib with the non-interactive Agg backend.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .data import save_image  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def montage(images: torch.Tensor, nrow: int, padding: int = 1, pad_value: float = 1.0) -> torch.Tensor:
    """Tile ``(N, C, H, W)`` images into one ``(C, H', W')`` grid, ``nrow`` images per row."""
    n, c, h, w = images.shape
    rows = (n + nrow - 1) // nrow
    grid = torch.full((c, rows * (h + padding) + padding, nrow * (w + padding) + padding), pad_value,
                      dtype=images.dtype)
    for i in range(n):
        r, col = divmod(i, nrow)
        top, left = padding + r * (h + padding), padding + col * (w + padding)
        grid[:, top : top + h, left : left + w] = images[i]
    return grid


def save_montage(path, images: torch.Tensor, nrow: int, padding: int = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(path, montage(images.detach().cpu(), nrow, padding))
    return path


def save_triptychs(path, original: torch.Tensor, recon: torch.Tensor, edited: torch.Tensor,
                   per_row: int = 2) -> Path:
    """Rows of ``original | reconstruction | edited`` triplets, ``per_row`` triplets per row."""
    n = original.shape[0]
    stacked = torch.stack([original, recon, edited], dim=1).reshape(3 * n, *original.shape[1:])
    return save_montage(path, stacked, nrow=3 * max(1, min(per_row, n)))


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curves(records: Sequence[dict], path, title: str | None = None) -> Path:
    """Per-step loss components (log scale) from a metrics log."""
    steps = [r for r in records if r.get("type") == "step"]
    keys = [k for k in ("l_ae", "l_cl", "l_reg", "l_ec_rec", "l_ec_gen", "l_g_rec", "l_g_gen")
            if steps and k in steps[0]]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        x = [r["step"] for r in steps]
        for k in keys:
            y = np.maximum([r[k] for r in steps], 1e-8)
            ax.plot(x, y, label=k)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2, frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_fid_by_epoch(epochs: Sequence[int], fids: Sequence[float], path, label: str = "reconstruction FID",
                      others: dict[str, tuple[Sequence[int], Sequence[float]]] | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(epochs, fids, marker="o", ms=3, label=label)
        for name, (e, f) in (others or {}).items():
            ax.plot(e, f, marker="s", ms=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("Frechet distance")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_image_panel(images: torch.Tensor, path, ncols: int = 8, titles: Sequence[str] | None = None) -> Path:
    """Images laid out with matplotlib (for annotated report panels)."""
    n = images.shape[0]
    ncols = max(1, min(ncols, n))
    nrows = max(1, (n + ncols - 1) // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.1 * ncols, 1.1 * nrows + 0.2), squeeze=False)
        for i, ax in enumerate(axes.flat):
            ax.axis("off")
            if i < n:
                arr = images[i].detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
                ax.imshow(arr.squeeze(), cmap="gray" if arr.shape[2] == 1 else None, interpolation="nearest")
                if titles is not None:
                    ax.set_title(titles[i], fontsize=6)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
