"""Segmentation accuracy metrics: binarization, Dice, IoU, pixel F1,
object-level F1, and the distribution statistics used in the comparison
tables.

Pixel F1 on the foreground class is identical to Dice per mask pair; it
is kept as a cross-check. The object-level F1 matches 4-connected
components greedily by IoU and is the genuinely distinct third metric.
Empty-vs-empty pairs score 1 for every overlap metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "binarize",
    "dsc",
    "iou",
    "pixel_f1",
    "object_f1",
    "MetricSummary",
    "summarize",
    "histogram",
]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def binarize(logits):
    """Per-pixel argmax of (N, 2, H, W) logits; ties go to background."""
    logits = np.asarray(logits)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected (N, 2, H, W) logits, got {logits.shape}")
    if np.isnan(logits).any():
        raise ValueError("NaN logits")
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


def _check_pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred.astype(bool), truth.astype(bool)


def dsc(pred, truth):
    """Dice similarity 2|A.B| / (|A| + |B|); 1 when both masks are empty."""
    a, b = _check_pair(pred, truth)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def iou(pred, truth):
    """Jaccard index |A.B| / |A+B|; 1 when both masks are empty."""
    a, b = _check_pair(pred, truth)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def pixel_f1(pred, truth):
    """Foreground-pixel F1 (== Dice per pair; kept as a cross-check)."""
    a, b = _check_pair(pred, truth)
    tp = np.logical_and(a, b).sum()
    fp = np.logical_and(a, ~b).sum()
    fn = np.logical_and(~a, b).sum()
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def object_f1(pred, truth, iou_threshold=0.5):
    """Detection F1 over 4-connected components, matched greedily by IoU.

    A predicted component counts as a true positive iff its one-to-one
    match reaches the IoU threshold. 1 when neither mask has objects.
    """
    a, b = _check_pair(pred, truth)
    pred_labels, n_pred = ndimage.label(a, structure=_CROSS)
    true_labels, n_true = ndimage.label(b, structure=_CROSS)
    if n_pred == 0 and n_true == 0:
        return 1.0
    if n_pred == 0 or n_true == 0:
        return 0.0
    # Joint histogram of component labels gives all pairwise overlaps.
    joint = pred_labels.astype(np.int64) * (n_true + 1) + true_labels
    counts = np.bincount(joint.ravel(), minlength=(n_pred + 1) * (n_true + 1))
    inter = counts.reshape(n_pred + 1, n_true + 1)[1:, 1:]
    pred_sizes = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)[1:]
    true_sizes = np.bincount(true_labels.ravel(), minlength=n_true + 1)[1:]
    union = pred_sizes[:, None] + true_sizes[None, :] - inter
    pair_iou = inter / union
    candidates = sorted(
        ((pair_iou[i, j], i, j) for i in range(n_pred) for j in range(n_true) if pair_iou[i, j] >= iou_threshold),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_pred = set()
    used_true = set()
    tp = 0
    for _, i, j in candidates:
        if i in used_pred or j in used_true:
            continue
        used_pred.add(i)
        used_true.add(j)
        tp += 1
    fp = n_pred - tp
    fn = n_true - tp
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class MetricSummary:
    mean: float
    median: float
    max: float
    percentile_10: float

    def as_dict(self):
        return {
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "percentile_10": self.percentile_10,
        }


def summarize(scores):
    """Mean/median/max/percentile-10 with linear-interpolated order statistics."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot summarize an empty score list")
    return MetricSummary(
        mean=float(scores.mean()),
        median=float(np.percentile(scores, 50)),
        max=float(scores.max()),
        percentile_10=float(np.percentile(scores, 10)),
    )


def histogram(scores, n_bins=10):
    """Equal-width bin counts over [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot histogram an empty score list")
    counts, _ = np.histogram(scores, bins=n_bins, range=(0.0, 1.0))
    return counts
