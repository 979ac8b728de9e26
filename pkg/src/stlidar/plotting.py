"""Static image output: 8-bit grayscale range views and summary figures."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .sensor import RangeScan  # noqa: E402


def to_uint8(img: np.ndarray, vmin: float = 0.0, vmax: Optional[float] = None) -> np.ndarray:
    """Linear map of ``[vmin, vmax]`` onto ``0..255`` (clipped)."""
    img = np.asarray(img, np.float64)
    if vmax is None:
        vmax = float(img.max()) if img.size and img.max() > vmin else vmin + 1.0
    scaled = (img - vmin) / (vmax - vmin)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray(path, img: np.ndarray, vmin: float = 0.0, vmax: Optional[float] = None) -> None:
    Image.fromarray(to_uint8(img, vmin, vmax), mode="L").save(path)


def save_scan_images(scan: RangeScan, out_dir, max_range: float, prefix: str = "") -> list[Path]:
    """Write depth, intensity and mask as 8-bit grayscale PNGs.

    Depth maps ``[0, max_range]`` and intensity ``[0, 1]`` to the full gray
    range; beam 0 (the lowest) is the bottom image row.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}{name}.png" for name in ("depth", "intensity", "mask")]
    save_gray(paths[0], scan.depth[::-1], 0.0, max_range)
    save_gray(paths[1], scan.intensity[::-1], 0.0, 1.0)
    save_gray(paths[2], scan.mask[::-1].astype(np.float64), 0.0, 1.0)
    return paths


def scan_figure(scans: Sequence[RangeScan], labels: Sequence[str], max_range: float, path) -> None:
    """Rows of depth / intensity / mask panels, one row per scan."""
    n = len(scans)
    fig, axes = plt.subplots(n, 3, figsize=(12, 1.2 + 1.1 * n), squeeze=False)
    for row, (scan, label) in enumerate(zip(scans, labels)):
        panels = ((scan.depth, 0, max_range, "depth [m]"), (scan.intensity, 0, 1, "intensity"),
                  (scan.mask.astype(float), 0, 1, "mask"))
        for col, (img, lo, hi, title) in enumerate(panels):
            ax = axes[row, col]
            im = ax.imshow(img, origin="lower", aspect="auto", cmap="gray", vmin=lo, vmax=hi,
                           interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(title, fontsize=9)
            if col == 0:
                ax.set_ylabel(label, fontsize=9)
            fig.colorbar(im, ax=ax, fraction=0.04, pad=0.01)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def loss_figure(history: dict, path, keys=("total", "depth", "intensity", "raydrop", "flow")) -> None:
    """Training curves on a log axis (zero-valued terms are skipped)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in keys:
        v = np.asarray(history.get(k, []), np.float64)
        if v.size and np.any(v > 0):
            ax.semilogy(np.arange(v.size), np.where(v > 0, v, np.nan), lw=0.8, label=k)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
