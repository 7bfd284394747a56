"""Paired RGB + depth/normal data: directory loaders and a seeded toy generator.

Directory layout (MVTec 3D-AD style, also used when persisting toy data)::

    root/<category>/<split>/<defect>/rgb/<stem>.png
    root/<category>/<split>/<defect>/xyz/<stem>.tiff   (depth, position grid or normal map)
    root/<category>/<split>/<defect>/gt/<stem>.png     (test split only)

``defect == "good"`` marks normal samples. Images are held as float32
``(3, H, W)`` arrays in ``[0, 1]``; the encoder applies its own normalization.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .exceptions import ConfigError, DataError, IngestionError

RANGE_FLOOR = 1e-12
SPLITS = ("train", "validation", "test")
ANOMALY_KINDS = ("2d", "3d", "both")
_AUX_EXTS = (".tiff", ".tif", ".png")


@dataclass
class MultimodalSample:
    image_2d: np.ndarray
    image_3d: np.ndarray
    label: int
    mask: np.ndarray | None
    identity: tuple[str, str, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_2d.shape != self.image_3d.shape:
            raise DataError(f"{self.identity}: modality shapes differ {self.image_2d.shape} vs {self.image_3d.shape}")
        if self.label not in (0, 1):
            raise DataError(f"{self.identity}: label must be 0 (normal) or 1 (anomalous)")

    @property
    def is_anomalous(self) -> bool:
        return self.label == 1

    @property
    def resolution(self) -> int:
        return self.image_2d.shape[-1]

    def mask_or_zeros(self) -> np.ndarray:
        if self.mask is not None:
            return self.mask
        return np.zeros(self.image_2d.shape[-2:], dtype=np.uint8)


# --- preprocessing ---------------------------------------------------------

def _resize(arr: np.ndarray, size: int, resample=Image.BILINEAR) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), resample), dtype=np.float32)


def preprocess_depth(raw, size: int | None = None) -> np.ndarray:
    """Hole-fill with the valid median, min-max to ``[0, 1]``, replicate to 3 channels, resize.

    Zero and non-finite readings count as invalid. A constant image maps to zeros.
    """
    d = np.asarray(raw, dtype=np.float64)
    if d.ndim != 2:
        raise IngestionError(f"depth grid must be 2-D, got shape {d.shape}")
    valid = np.isfinite(d) & (d != 0)
    if not valid.any():
        raise IngestionError("depth image has no valid pixels")
    d = np.where(valid, d, np.median(d[valid]))
    lo, hi = d.min(), d.max()
    d = (d - lo) / (hi - lo) if hi - lo > RANGE_FLOOR else np.zeros_like(d)
    d = d.astype(np.float32)
    if size is not None:
        d = np.clip(_resize(d, size), 0.0, 1.0)
    return np.repeat(d[None], 3, axis=0)


def read_rgb(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_aux(path: Path, size: int) -> np.ndarray:
    """Depth TIFF/PNG, 3-channel position grid (z is used) or 8-bit normal map."""
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            arr = tifffile.imread(path)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read companion image {path}: {exc}") from exc
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.dtype == np.uint8:
        # surface-normal map stored as an ordinary image
        return read_rgb(path, size)
    if arr.ndim == 3 and arr.shape[-1] >= 3:
        arr = arr[..., 2]
    elif arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr[2]
    if arr.ndim != 2:
        raise IngestionError(f"unsupported companion image layout {arr.shape} in {path}")
    return preprocess_depth(arr, size)


def _read_mask(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (size, size):
                im = im.resize((size, size), Image.NEAREST)
            return (np.asarray(im) > 0).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read mask {path}: {exc}") from exc


def _companion(folder: Path, stem: str, exts=_AUX_EXTS) -> Path:
    for ext in exts:
        p = folder / (stem + ext)
        if p.is_file():
            return p
    raise IngestionError(f"missing companion file for {stem!r}: expected {folder / stem}{{{','.join(exts)}}}")


def load_paired(root, category: str, split: str, size: int = 256, rgb_dir: str = "rgb",
                aux_dir: str = "xyz", mask_dir: str = "gt") -> list[MultimodalSample]:
    """Load one split of a paired-image dataset in lexicographic order."""
    base = Path(root) / category / split
    if not base.is_dir():
        raise IngestionError(f"split directory not found: {base}")
    samples = []
    for defect_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        defect = defect_dir.name
        label = 0 if defect == "good" else 1
        if label and split != "test":
            raise DataError(f"{split} split must only contain 'good' samples, found {defect_dir}")
        rgb_files = sorted((defect_dir / rgb_dir).glob("*.png"))
        for path in rgb_files:
            aux = _companion(defect_dir / aux_dir, path.stem)
            mask = None
            if split == "test":
                mask_path = defect_dir / mask_dir / (path.stem + ".png")
                if mask_path.is_file():
                    mask = _read_mask(mask_path, size)
                elif label:
                    raise IngestionError(f"missing ground-truth mask {mask_path}")
                else:
                    mask = np.zeros((size, size), dtype=np.uint8)
                if label == 0:
                    mask = np.zeros_like(mask)
            samples.append(MultimodalSample(
                read_rgb(path, size), read_aux(aux, size), label, mask,
                (category, split, len(samples)), {"defect": defect, "stem": path.stem},
            ))
    return samples


def load_mvtec3d(root, category: str, split: str, size: int = 256) -> list[MultimodalSample]:
    """MVTec 3D-AD: RGB PNGs with ``xyz`` position TIFFs (z channel used as depth)."""
    return load_paired(root, category, split, size, "rgb", "xyz", "gt")


# --- toy generator ---------------------------------------------------------

@dataclass
class ToyConfig:
    resolution: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    anomaly_fraction: float = 0.5
    # probabilities of 2D-only, 3D-only and both-modality anomalies
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    blob_radius: tuple[float, float] = (4.0, 8.0)
    amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if len(self.mix) != 3 or min(self.mix) < 0 or abs(sum(self.mix) - 1) > 1e-6:
            raise ConfigError(f"mix must be 3 non-negative probabilities summing to 1, got {self.mix}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("sample counts must be > 0")
        if self.resolution < 32:
            raise ConfigError("resolution must be >= 32")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ConfigError("blob_radius must be (min, max) with 0 < min <= max")

    @classmethod
    def from_run_config(cls, cfg) -> ToyConfig:
        d = cfg.data
        return cls(cfg.resolution, d.n_train, d.n_val, d.n_test, d.anomaly_fraction,
                   tuple(d.anomaly_mix), tuple(d.blob_radius), d.blob_amplitude, d.seed)


_SPLIT_IDS = {"train": 0, "validation": 1, "test": 2}
_LIGHT = np.array([-0.5, -0.5, 1.0]) / np.linalg.norm([-0.5, -0.5, 1.0])
_LOW = np.array([0.55, 0.35, 0.20])
_HIGH = np.array([0.95, 0.80, 0.50])
_BACKGROUND = np.array([0.15, 0.20, 0.28])
_BLOTCHES = np.array([[0.10, 0.55, 0.90], [0.20, 0.85, 0.30], [0.85, 0.15, 0.60]])


def _latent(cfg: ToyConfig, rng: np.random.Generator) -> dict:
    s = cfg.resolution / 64
    return {
        "center": np.full(2, cfg.resolution / 2),
        "outer": 24 * s,
        "plateau": 11 * s,
        "phase": rng.uniform(0, 2 * np.pi),
        "wave": rng.uniform(0.05, 0.1),
        "tint": 1 + rng.uniform(-0.05, 0.05, size=3),
        "noise_seed": int(rng.integers(2 ** 31)),
    }


def _height(cfg: ToyConfig, lat: dict) -> np.ndarray:
    """Mesa: flat top at 1, cosine flanks with angular ripples, floor at 0."""
    n = cfg.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy, dx = yy - lat["center"][0], xx - lat["center"][1]
    r = np.hypot(dx, dy)
    t = np.clip((r - lat["plateau"]) / (lat["outer"] - lat["plateau"]), 0, 1)
    h = 0.5 * (1 + np.cos(np.pi * t))
    ripple = lat["wave"] * np.sin(5 * np.arctan2(dy, dx) + lat["phase"]) * np.sin(np.pi * t)
    return np.clip(h + ripple, 0, 1)


def _render_rgb(cfg: ToyConfig, lat: dict, h: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(h)
    k = cfg.resolution / 8
    normal = np.stack([-gx * k, -gy * k, np.ones_like(h)])
    normal /= np.linalg.norm(normal, axis=0, keepdims=True)
    shade = np.clip(np.tensordot(_LIGHT, normal, axes=1), 0, 1)
    n = cfg.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    r = np.hypot(yy - lat["center"][0], xx - lat["center"][1])
    alpha = np.clip((lat["outer"] - r) / 1.5, 0, 1)
    obj = (_LOW[:, None, None] + (_HIGH - _LOW)[:, None, None] * h) * (0.55 + 0.45 * shade)
    rgb = alpha * obj * lat["tint"][:, None, None] + (1 - alpha) * _BACKGROUND[:, None, None]
    noise = np.random.default_rng(lat["noise_seed"]).normal(0, 0.01, size=rgb.shape)
    return np.clip(rgb + noise, 0, 1)


def _blob(cfg: ToyConfig, lat: dict, rng: np.random.Generator) -> dict:
    rad = rng.uniform(*cfg.blob_radius) * cfg.resolution / 64
    reach = max(lat["outer"] - rad - 2, 0.0)
    ang = rng.uniform(0, 2 * np.pi)
    dist = reach * np.sqrt(rng.uniform())
    center = lat["center"] + dist * np.array([np.sin(ang), np.cos(ang)])
    return {"center": center, "radius": rad, "color": _BLOTCHES[rng.integers(len(_BLOTCHES))]}


def _blob_weight(cfg: ToyConfig, blob: dict) -> np.ndarray:
    n = cfg.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    d = np.hypot(yy - blob["center"][0], xx - blob["center"][1]) / blob["radius"]
    return np.where(d < 1, (1 - d ** 2) ** 2, 0.0)


def render_toy(cfg: ToyConfig, split: str, index: int, kind: str | None = None) -> tuple[MultimodalSample, np.ndarray]:
    """Render one toy sample; ``kind`` in {None, "2d", "3d", "both"}.

    Returns ``(sample, raw_depth)``. The latent scene depends only on
    ``(seed, split, index)``, so ``kind=None`` yields the normal twin of any
    anomalous sample.
    """
    if kind is not None and kind not in ANOMALY_KINDS:
        raise ConfigError(f"unknown anomaly kind {kind!r}")
    rng = np.random.default_rng([cfg.seed, _SPLIT_IDS[split], index])
    lat = _latent(cfg, rng)
    h = _height(cfg, lat)
    rgb = _render_rgb(cfg, lat, h)
    blob = _blob(cfg, lat, rng)
    mask = None
    meta = {"anomaly": kind}
    if kind is not None:
        g = _blob_weight(cfg, blob)
        mask = (g > 0).astype(np.uint8)
        a = cfg.amplitude
        if kind in ("2d", "both"):
            rgb = rgb * (1 - a * g) + a * g * blob["color"][:, None, None]
        if kind in ("3d", "both"):
            cy, cx = np.clip(blob["center"].astype(int), 0, cfg.resolution - 1)
            sign = -1.0 if h[cy, cx] > 0.5 else 1.0
            h = np.clip(h + sign * a * g, 0, 1)
        meta.update(blob_center=blob["center"].tolist(), blob_radius=float(blob["radius"]))
    elif split == "test":
        mask = np.zeros((cfg.resolution, cfg.resolution), dtype=np.uint8)
    raw = (0.5 + h).astype(np.float32)
    sample = MultimodalSample(rgb.astype(np.float32), preprocess_depth(raw), int(kind is not None),
                              mask, ("toy", split, index), meta)
    return sample, raw


def _test_kinds(cfg: ToyConfig) -> list[str | None]:
    n_anom = int(round(cfg.anomaly_fraction * cfg.n_test))
    quotas = np.array(cfg.mix) * n_anom
    counts = np.floor(quotas).astype(int)
    for i in np.argsort(-(quotas - counts), kind="stable")[: n_anom - counts.sum()]:
        counts[i] += 1
    kinds = [None] * (cfg.n_test - n_anom) + [k for k, c in zip(ANOMALY_KINDS, counts) for _ in range(c)]
    order = np.random.default_rng([cfg.seed, 99]).permutation(len(kinds))
    return [kinds[i] for i in order]


def generate_toy(cfg: ToyConfig) -> tuple[list[MultimodalSample], list[MultimodalSample], list[MultimodalSample]]:
    """Deterministic ``(train, validation, test)`` toy splits for ``cfg.seed``."""
    train = [render_toy(cfg, "train", i)[0] for i in range(cfg.n_train)]
    val = [render_toy(cfg, "validation", i)[0] for i in range(cfg.n_val)]
    test = [render_toy(cfg, "test", i, k)[0] for i, k in enumerate(_test_kinds(cfg))]
    return train, val, test


def save_toy(cfg: ToyConfig, out_dir, category: str = "toy") -> dict[str, int]:
    """Write the toy dataset in the loader layout; returns per-split counts."""
    counts = {}
    jobs = [("train", [None] * cfg.n_train), ("validation", [None] * cfg.n_val), ("test", _test_kinds(cfg))]
    for split, kinds in jobs:
        for i, kind in enumerate(kinds):
            sample, raw = render_toy(cfg, split, i, kind)
            folder = Path(out_dir) / category / split / ("good" if kind is None else f"anomaly_{kind}")
            for sub in ("rgb", "xyz") + (("gt",) if split == "test" else ()):
                (folder / sub).mkdir(parents=True, exist_ok=True)
            stem = f"{i:03d}"
            rgb8 = np.round(sample.image_2d.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(rgb8).save(folder / "rgb" / f"{stem}.png")
            tifffile.imwrite(folder / "xyz" / f"{stem}.tiff", raw)
            if split == "test":
                Image.fromarray(sample.mask_or_zeros() * 255).save(folder / "gt" / f"{stem}.png")
        counts[split] = len(kinds)
    return counts


def check_split(samples: list[MultimodalSample], split: str) -> None:
    """Raise DataError if a train/validation split holds anomalies or masks disagree with labels."""
    for s in samples:
        if split in ("train", "validation") and s.is_anomalous:
            raise DataError(f"{split} data contains an anomalous sample {s.identity}")
        if s.mask is not None and bool(s.mask.any()) != s.is_anomalous:
            raise DataError(f"mask/label mismatch for {s.identity}")


def load_dataset(cfg) -> tuple[list[MultimodalSample], list[MultimodalSample], list[MultimodalSample]]:
    """Resolve ``data.*`` config keys into ``(train, validation, test)`` splits."""
    d = cfg.data
    if d.dataset == "toy" and not d.root:
        return generate_toy(ToyConfig.from_run_config(cfg))
    root = cfg.data_root()
    if not root or not os.path.isdir(root):
        raise ConfigError(f"dataset root not found: {root!r} (set data.root or TRD_DATA_ROOT)")
    splits = [load_paired(root, d.category, s, cfg.resolution, d.rgb_dir, d.aux_dir, d.mask_dir) for s in SPLITS]
    return tuple(splits)
