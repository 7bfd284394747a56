"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .datasets import MultimodalSample
from .exceptions import DataError, DimensionError


def check_multimodal(X, resolution: int | None = None, name: str = "X") -> list[MultimodalSample]:
    """Normalize ``X`` into a list of :class:`MultimodalSample`.

    Accepts a sequence of samples or a pair ``(images_2d, images_3d)`` of
    arrays shaped ``(N, 3, H, W)``; a 3-D modality array ``(N, H, W)`` is
    taken as single-channel depth already scaled to ``[0, 1]`` and replicated.
    """
    if isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], MultimodalSample):
        a = np.asarray(X[0], dtype=np.float32)
        b = np.asarray(X[1], dtype=np.float32)
        if b.ndim == 3:
            b = np.repeat(b[:, None], 3, axis=1)
        if a.ndim != 4 or a.shape[1] != 3:
            raise DimensionError(f"{name}[0] must have shape (N, 3, H, W), got {a.shape}")
        if a.shape != b.shape:
            raise DimensionError(f"{name}: modality arrays differ in shape: {a.shape} vs {b.shape}")
        samples = [MultimodalSample(a[i], b[i], 0, None, ("array", name, i)) for i in range(a.shape[0])]
    else:
        samples = list(X)
        if not all(isinstance(s, MultimodalSample) for s in samples):
            raise TypeError(f"{name} must be a sequence of MultimodalSample or a (2d, 3d) array pair")
    if not samples:
        raise DataError(f"{name} is empty")
    for s in samples:
        if s.image_2d.ndim != 3 or s.image_2d.shape[0] != 3 or s.image_2d.shape[1] != s.image_2d.shape[2]:
            raise DimensionError(f"{name}: images must be square (3, H, W), got {s.image_2d.shape}")
        if resolution is not None and s.image_2d.shape[-1] != resolution:
            raise DimensionError(f"{name}: expected {resolution}x{resolution} images, got {s.image_2d.shape[-2:]}")
        if not (np.isfinite(s.image_2d).all() and np.isfinite(s.image_3d).all()):
            raise DataError(f"{name}: non-finite pixel values in {s.identity}")
    return samples
