"""Evaluation protocol: rotated-IoU average precision and the relative
corruption-error summary metrics."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError
from .geometry import BoxBEV, rotated_iou

AP_RECALL_POINTS = 41  # interpolation grid 0.000, 0.025, ..., 1.000


def match_predictions(preds: list[BoxBEV], gts: list[BoxBEV], iou_thresh: float) -> list[bool]:
    """Greedy score-descending matching: each prediction claims the highest
    IoU ground-truth box still unmatched, provided IoU >= threshold. Returns
    per-prediction true-positive flags in score-descending order."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(preds[i], gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(preds: list[BoxBEV], gts: list[BoxBEV], iou_thresh: float) -> float:
    """41-point interpolated AP with rotated-IoU matching.

    Conventions: an empty scene with no predictions scores 1; ground truth
    with no predictions scores 0; predictions with no ground truth score 0.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise InvalidArgumentError(f"iou threshold {iou_thresh} outside (0, 1]")
    if not gts:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    flags = np.array(match_predictions(preds, gts, iou_thresh), dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, AP_RECALL_POINTS):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / AP_RECALL_POINTS)


def dataset_average_precision(per_scene: list[tuple], iou_thresh: float) -> float:
    """AP pooled over many scenes: matching stays per scene, the PR curve is
    built from all predictions ranked by score globally."""
    scored: list[tuple[float, bool]] = []
    n_gt = 0
    for preds, gts in per_scene:
        n_gt += len(gts)
        if not preds:
            continue
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
        flags = match_predictions(preds, gts, iou_thresh)
        for rank, i in enumerate(order):
            scored.append((preds[i].score, flags[rank]))
    if n_gt == 0:
        return 1.0 if not scored else 0.0
    if not scored:
        return 0.0
    scored.sort(key=lambda t: -t[0])
    flags = np.array([f for _, f in scored], dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, AP_RECALL_POINTS):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / AP_RECALL_POINTS)


def compute_rce_mrce(clean: tuple, corrupted: list[tuple]) -> tuple[float, float, float]:
    """Average relative AP drop across corruption conditions.

    clean is (AP@0.5, AP@0.7); corrupted is one such pair per corruption.
    Returns (RCE@0.5, RCE@0.7, mRCE) as fractions of the clean AP, where
    mRCE is exactly the arithmetic mean of the two RCE values.
    """
    c50, c70 = clean
    if c50 <= 0.0 or c70 <= 0.0:
        raise UndefinedMetricError(f"clean AP must be positive, got {clean}")
    if not corrupted:
        raise InvalidArgumentError("need at least one corrupted condition")
    rce50 = float(np.mean([(c50 - a50) / c50 for a50, _ in corrupted]))
    rce70 = float(np.mean([(c70 - a70) / c70 for _, a70 in corrupted]))
    return rce50, rce70, (rce50 + rce70) / 2.0
