"""Average precision for boxes and masks on small datasets."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .boxes import pairwise_iou
from .uqr import mask_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, summed over every recall step."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def _box_overlaps(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if not len(pred) or not len(gt):
        return np.zeros((len(pred), len(gt)))
    return pairwise_iou(np.asarray(pred, float).reshape(-1, 4), np.asarray(gt, float).reshape(-1, 4))[0]


def _mask_overlaps(pred, gt) -> np.ndarray:
    return np.array([[mask_iou(p, g) for g in gt] for p in pred]).reshape(len(pred), len(gt))


def class_ap(detections: Sequence[dict], ground_truths: Sequence[dict], label: int, threshold: float,
             key: str = "boxes", overlap: Callable = _box_overlaps) -> float | None:
    """AP for one class at one IoU threshold; None when the class has no ground truth.

    Detections are ranked by score over the whole dataset (ties by image,
    then slot order). Each goes to the unmatched ground truth of the same
    image with the highest IoU, provided it reaches ``threshold``.
    """
    n_gt = sum(int(np.sum(np.asarray(g["labels"]) == label)) for g in ground_truths)
    if n_gt == 0:
        return None
    entries = []
    overlaps = []
    for i, (det, gt) in enumerate(zip(detections, ground_truths)):
        dmask = np.asarray(det["labels"]) == label
        gmask = np.asarray(gt["labels"]) == label
        d_items = [x for x, keep in zip(det[key], dmask) if keep]
        g_items = [x for x, keep in zip(gt[key], gmask) if keep]
        overlaps.append(overlap(d_items, g_items))
        for j, s in enumerate(np.asarray(det["scores"])[dmask]):
            entries.append((-float(s), i, j))
    if not entries:
        return 0.0
    entries.sort()
    used = [np.zeros(o.shape[1], dtype=bool) for o in overlaps]
    tp = np.zeros(len(entries))
    for rank, (_, i, j) in enumerate(entries):
        ious = np.where(used[i], -1.0, overlaps[i][j])
        if ious.size and ious.max() >= threshold:
            used[i][int(np.argmax(ious))] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    return ap_from_pr(recall, precision)


def mean_ap(detections, ground_truths, threshold: float, num_classes: int, key: str = "boxes") -> float:
    overlap = _box_overlaps if key == "boxes" else _mask_overlaps
    aps = [class_ap(detections, ground_truths, c, threshold, key, overlap) for c in range(num_classes)]
    aps = [a for a in aps if a is not None]
    return float(np.mean(aps)) if aps else 0.0


def evaluate_detections(detections: Sequence[dict], ground_truths: Sequence[dict], num_classes: int,
                        masks: bool = False) -> dict[str, float]:
    """AP@0.5 and AP averaged over IoU 0.50:0.05:0.95, for boxes and optionally masks.

    Each detection dict holds ``scores``, ``labels`` and pixel xyxy ``boxes``
    (plus ``masks`` for mask AP); ground truth dicts hold ``labels`` and
    ``boxes`` (and ``masks``).
    """
    report = {"ap50": mean_ap(detections, ground_truths, 0.5, num_classes)}
    report["ap"] = float(np.mean([mean_ap(detections, ground_truths, t, num_classes) for t in IOU_THRESHOLDS]))
    if masks:
        report["mask_ap50"] = mean_ap(detections, ground_truths, 0.5, num_classes, key="masks")
        report["mask_ap"] = float(np.mean([mean_ap(detections, ground_truths, t, num_classes, key="masks")
                                           for t in IOU_THRESHOLDS]))
    return report
