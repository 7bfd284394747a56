"""Heatmap export. Display scaling only; float grids are the quantitative output."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

CMAP = "inferno"


def heatmap_rgb(m: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``(H, W, 3)`` uint8 heatmap, per-image min-max scaled, GT contour drawn in white."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    rgb = (colormaps[CMAP](scaled)[..., :3] * 255).round().astype(np.uint8)
    if mask is not None and np.any(mask):
        region = np.asarray(mask) > 0
        contour = region & ~ndimage.binary_erosion(region)
        rgb[contour] = 255
    return rgb


def save_heatmap(path, m: np.ndarray, mask: np.ndarray | None = None) -> None:
    Image.fromarray(heatmap_rgb(m, mask)).save(path)


def save_grid(path, m: np.ndarray) -> None:
    """Write a float32 grid as ``.npy``."""
    np.save(Path(path), np.asarray(m, dtype="<f4"))
