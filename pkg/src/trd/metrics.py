"""Detection and localization metrics: AUROC, AP and PRO."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .exceptions import MetricError

METRIC_NAMES = ("i_auc", "i_ap", "p_auc", "p_ap", "pro")
METRIC_TITLES = {"i_auc": "I-AUC", "i_ap": "I-AP", "p_auc": "P-AUC", "p_ap": "P-AP", "pro": "PRO"}
_EIGHT = np.ones((3, 3), dtype=int)


def _check_scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pairs count one half."""
    s, y = _check_scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP over the descending sweep of unique thresholds."""
    s, y = _check_scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected components of a binary mask."""
    return ndimage.label(np.asarray(mask) > 0, structure=_EIGHT)


def pro_curve(maps, masks, max_thresholds: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean per-region overlap and normal-pixel FPR for a descending threshold sweep.

    Returns ``(thresholds, fpr, pro)`` with a leading ``(+inf, 0, 0)`` point.
    A pixel is predicted anomalous when its score is ``>= threshold``. By
    default every unique score is a threshold; ``max_thresholds`` switches to
    that many quantiles of the scores.
    """
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if maps.shape != masks.shape:
        raise MetricError(f"maps and masks differ in shape: {maps.shape} vs {masks.shape}")
    if not np.isfinite(maps).all():
        raise MetricError("prediction maps must be finite")
    weights = np.zeros(maps.shape, dtype=np.float64)
    labels = [label_regions(m) for m in masks]
    n_regions = sum(n for _, n in labels)
    if n_regions == 0:
        raise MetricError("PRO needs at least one anomalous region")
    for k, (lab, n) in enumerate(labels):
        if n:
            sizes = np.bincount(lab.ravel())
            region_w = np.r_[0.0, 1.0 / (n_regions * sizes[1:])]
            weights[k] = region_w[lab]
    normal = (masks == 0).ravel()
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise MetricError("PRO needs normal pixels to measure the false positive rate")

    flat = maps.ravel()
    order = np.argsort(-flat, kind="mergesort")
    s = flat[order]
    cum_pro = np.cumsum(weights.ravel()[order])
    cum_fp = np.cumsum(normal[order])
    if max_thresholds is None:
        ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
        thresholds = s[ends]
    else:
        thresholds = np.unique(np.quantile(flat, np.linspace(0.0, 1.0, max_thresholds)))[::-1]
        # number of pixels >= t in the descending array, minus one
        ends = np.searchsorted(-s, -thresholds, side="right") - 1
    pro = cum_pro[ends]
    fpr = cum_fp[ends] / n_normal
    return np.r_[np.inf, thresholds], np.r_[0.0, fpr], np.r_[0.0, pro]


def integrate_clipped(x: np.ndarray, y: np.ndarray, x_max: float) -> float:
    """Trapezoid area under a curve with non-decreasing ``x`` from ``x[0]`` to ``x_max``."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= x_max:
            break
        if x1 > x_max:
            y1 = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0)
            x1 = x_max
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


def pro(maps, masks, fpr_limit: float = 0.3, max_thresholds: int | None = None) -> float:
    """Area under the PRO curve up to ``fpr_limit``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise MetricError("fpr_limit must lie in (0, 1]")
    _, fpr, overlap = pro_curve(maps, masks, max_thresholds)
    return integrate_clipped(fpr, overlap, fpr_limit) / fpr_limit


@dataclass
class MetricsReport:
    """Per-category metric values (fractions in [0, 1]) plus run metadata."""

    categories: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    @property
    def average(self) -> dict[str, float]:
        out = {}
        for name in METRIC_NAMES:
            vals = [c[name] for c in self.categories.values() if c.get(name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def merge(self, other: MetricsReport) -> MetricsReport:
        return MetricsReport({**self.categories, **other.categories}, {**self.meta, **other.meta})

    def to_dict(self) -> dict:
        return {"categories": self.categories, "average": self.average, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        d = json.loads(text)
        return cls(d["categories"], d.get("meta", {}))

    def to_table(self) -> str:
        """Fixed-width table in percent, one row per category plus the mean."""
        head = f"{'category':<14}" + "".join(f"{METRIC_TITLES[n]:>8}" for n in METRIC_NAMES)
        rows = [head, "-" * len(head)]

        def fmt(v):
            return f"{'-':>8}" if v is None else f"{100 * v:8.1f}"

        for cat, vals in self.categories.items():
            rows.append(f"{cat:<14}" + "".join(fmt(vals.get(n)) for n in METRIC_NAMES))
        if len(self.categories) > 1:
            rows.append(f"{'mean':<14}" + "".join(fmt(v) for v in self.average.values()))
        for k, v in sorted(self.meta.items()):
            rows.append(f"# {k}: {v}")
        return "\n".join(rows) + "\n"


def evaluate_all(image_scores, image_labels, pixel_maps, masks, category: str = "default",
                 fpr_limit: float = 0.3, max_thresholds: int | None = None,
                 meta: dict | None = None) -> MetricsReport:
    """Compute I-AUC, I-AP, P-AUC, P-AP and PRO for one category."""
    try:
        maps = np.asarray(pixel_maps, dtype=np.float64)
        gts = (np.asarray(masks) > 0).astype(np.uint8)
        values = {
            "i_auc": auroc(image_scores, image_labels),
            "i_ap": average_precision(image_scores, image_labels),
            "p_auc": auroc(maps.ravel(), gts.ravel()),
            "p_ap": average_precision(maps.ravel(), gts.ravel()),
            "pro": pro(maps, gts, fpr_limit, max_thresholds),
        }
    except MetricError as exc:
        raise MetricError(f"category {category!r}: {exc}") from exc
    return MetricsReport({category: values}, dict(meta or {}))
