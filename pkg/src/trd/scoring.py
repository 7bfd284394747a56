"""Anomaly maps, smoothing, calibration, fusion and image scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .exceptions import CalibrationError, ConfigError, DimensionError
from .objectives import level_distances

SIGMA_FLOOR = 1e-12
TRUNCATE = 4.0


def branch_map(F_E: list[torch.Tensor], F_CA: list[torch.Tensor], out_size: tuple[int, int]) -> np.ndarray:
    """Sum of bilinearly upsampled per-level ``1 - cos`` maps.

    Pyramids may be batched (returns ``(N, H, W)``) or single (``(H, W)``).
    """
    single = F_E[0].dim() == 3
    if single:
        F_E, F_CA = [f.unsqueeze(0) for f in F_E], [f.unsqueeze(0) for f in F_CA]
    with torch.no_grad():
        total = None
        for d in level_distances(F_E, F_CA):
            up = F.interpolate(d, size=tuple(out_size), mode="bilinear", align_corners=False)
            total = up if total is None else total + up
    out = total[:, 0].double().cpu().numpy()
    return out[0] if single else out


def smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur over the last two axes, truncated at 4 sigma, reflective border."""
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    m = np.asarray(m, dtype=np.float64)
    axes_sigma = (0,) * (m.ndim - 2) + (sigma, sigma)
    return gaussian_filter(m, sigma=axes_sigma, mode="reflect", truncate=TRUNCATE)


@dataclass
class CalibrationStats:
    mu_2d: float
    sigma_2d: float
    mu_3d: float
    sigma_3d: float

    def to_dict(self) -> dict[str, float]:
        return {"mu_2d": self.mu_2d, "sigma_2d": self.sigma_2d, "mu_3d": self.mu_3d, "sigma_3d": self.sigma_3d}

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationStats:
        return cls(float(d["mu_2d"]), float(d["sigma_2d"]), float(d["mu_3d"]), float(d["sigma_3d"]))

    @classmethod
    def from_maps(cls, maps_2d: np.ndarray, maps_3d: np.ndarray) -> CalibrationStats:
        """Pooled mean and population std over every pixel of every map."""
        if np.size(maps_2d) == 0 or np.size(maps_3d) == 0:
            raise CalibrationError("no validation maps to calibrate on")
        a = np.asarray(maps_2d, dtype=np.float64)
        b = np.asarray(maps_3d, dtype=np.float64)
        return cls(float(a.mean()), max(float(a.std()), SIGMA_FLOOR),
                   float(b.mean()), max(float(b.std()), SIGMA_FLOOR))


def fuse(m2d: np.ndarray, m3d: np.ndarray, stats: CalibrationStats | None = None,
         strategy: str = "norm_sum") -> np.ndarray:
    """Combine branch maps; ``norm_sum`` z-normalizes each with ``stats`` first."""
    m2d = np.asarray(m2d, dtype=np.float64)
    m3d = np.asarray(m3d, dtype=np.float64)
    if m2d.shape != m3d.shape:
        raise DimensionError(f"fuse: shape mismatch {m2d.shape} vs {m3d.shape}")
    if strategy == "norm_sum":
        if stats is None:
            raise CalibrationError("norm_sum fusion needs calibration stats")
        return (m2d - stats.mu_2d) / stats.sigma_2d + (m3d - stats.mu_3d) / stats.sigma_3d
    if strategy == "sum_raw":
        return m2d + m3d
    if strategy == "product":
        return m2d * m3d
    raise ConfigError(f"unknown fusion strategy {strategy!r}")


def image_score(m: np.ndarray) -> float | np.ndarray:
    """Maximum pixel; a stack of maps gives one score per map."""
    m = np.asarray(m)
    if m.ndim <= 2:
        return float(m.max())
    return m.reshape(m.shape[0], -1).max(axis=1)


def _batches(samples, batch_size):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        yield (torch.stack([torch.as_tensor(s.image_2d) for s in chunk]),
               torch.stack([torch.as_tensor(s.image_3d) for s in chunk]))


def predict_branch_maps(model, samples, sigma: float, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed per-branch maps ``(N, H, W)`` for both branches, model in eval mode."""
    was_training = model.training
    model.eval()
    out2d, out3d = [], []
    try:
        with torch.no_grad():
            for x2d, x3d in _batches(samples, batch_size):
                out = model(x2d, x3d)
                size = tuple(x2d.shape[-2:])
                out2d.append(smooth(branch_map(out.branch_2d.F_E_own, out.branch_2d.F_CA, size), sigma))
                out3d.append(smooth(branch_map(out.branch_3d.F_E_own, out.branch_3d.F_CA, size), sigma))
    finally:
        model.train(was_training)
    if not out2d:
        return np.zeros((0, 0, 0)), np.zeros((0, 0, 0))
    return np.concatenate(out2d), np.concatenate(out3d)


def calibrate(model, validation_normals, sigma: float, batch_size: int = 32) -> CalibrationStats:
    """Per-branch pooled stats of smoothed maps over validation normal samples."""
    if len(validation_normals) == 0:
        raise CalibrationError("calibration needs at least one validation sample")
    if any(getattr(s, "is_anomalous", False) for s in validation_normals):
        raise CalibrationError("calibration samples must all be normal")
    m2d, m3d = predict_branch_maps(model, validation_normals, sigma, batch_size)
    return CalibrationStats.from_maps(m2d, m3d)
