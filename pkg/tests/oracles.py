"""Brute-force reference implementations for the metric tests."""
import numpy as np
from skimage.measure import label


def auroc_pairs(scores, labels):
    s, y = np.asarray(scores, float), np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def ap_sweep(scores, labels):
    s, y = np.asarray(scores, float), np.asarray(labels).astype(bool)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = np.sum(pred & y)
        recall = tp / y.sum()
        ap += (recall - prev_recall) * tp / pred.sum()
        prev_recall = recall
    return ap


def pro_sweep(maps, masks, fpr_limit):
    """Threshold sweep with per-threshold region overlaps, then clipped trapezoid."""
    maps, masks = np.asarray(maps, float), np.asarray(masks) > 0
    regions = []
    for k in range(len(maps)):
        lab = label(masks[k], connectivity=2)
        regions += [(k, lab == r) for r in range(1, lab.max() + 1)]
    fprs, pros = [0.0], [0.0]
    for t in sorted(set(maps.ravel().tolist()), reverse=True):
        pred = maps >= t
        fprs.append(np.sum(pred & ~masks) / np.sum(~masks))
        pros.append(np.mean([np.sum(pred[k] & r) / r.sum() for k, r in regions]))
    fprs, pros = np.array(fprs), np.array(pros)
    keep = fprs <= fpr_limit
    x, yv = list(fprs[keep]), list(pros[keep])
    nxt = np.flatnonzero(~keep)
    if nxt.size:
        j = nxt[0]
        x0, x1, y0, y1 = fprs[j - 1], fprs[j], pros[j - 1], pros[j]
        x.append(fpr_limit)
        yv.append(y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0))
    area = sum((x[i] - x[i - 1]) * (yv[i] + yv[i - 1]) / 2 for i in range(1, len(x)))
    return area / fpr_limit
