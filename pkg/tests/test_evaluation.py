import numpy as np
import pytest

from vidt.evaluation import IOU_THRESHOLDS, ap_from_pr, class_ap, evaluate_detections, mean_ap


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_force_ap(dets, gts, label, thr):
    """Plain-loop evaluator: greedy score-ordered matching, then precision at every true positive
    replaced by the best precision at any deeper cut-off."""
    n_gt = sum(1 for g in gts for l in g["labels"] if l == label)
    flat = []
    for i, d in enumerate(dets):
        for j in range(len(d["scores"])):
            if d["labels"][j] == label:
                flat.append((d["scores"][j], i, j))
    flat.sort(key=lambda e: (-e[0], e[1], e[2]))
    taken = {}
    hits = []
    for _, i, j in flat:
        best, best_k = -1.0, None
        for k, (gl, gb) in enumerate(zip(gts[i]["labels"], gts[i]["boxes"])):
            if gl != label or taken.get((i, k)):
                continue
            o = iou(dets[i]["boxes"][j], gb)
            if o > best:
                best, best_k = o, k
        if best_k is not None and best >= thr:
            taken[(i, best_k)] = True
            hits.append(1)
        else:
            hits.append(0)
    precisions = []
    tp = 0
    for rank, h in enumerate(hits, 1):
        tp += h
        precisions.append(tp / rank)
    total = 0.0
    for rank, h in enumerate(hits):
        if h:
            total += max(precisions[rank:]) / n_gt
    return total


B = [[0, 0, 10, 10], [20, 20, 30, 30], [40, 0, 50, 12], [5, 30, 25, 45]]
NEAR = [[1, 1, 11, 11], [20, 21, 30, 31], [40, 1, 50, 13], [6, 30, 26, 46]]
MISS = [[60, 60, 70, 70]]


def det(boxes, scores, labels=None):
    return {"boxes": boxes, "scores": scores, "labels": labels or [0] * len(boxes)}


def gt(boxes, labels=None):
    return {"boxes": boxes, "labels": labels or [0] * len(boxes)}


CASES = [
    ([det(B[:2], [0.9, 0.8])], [gt(B[:2])]),
    ([det(B[:2] + MISS, [0.9, 0.2, 0.5])], [gt(B[:2])]),
    ([det(MISS + B[:1], [0.95, 0.1])], [gt(B[:3])]),
    ([det(NEAR[:4], [0.4, 0.9, 0.6, 0.7])], [gt(B[:4])]),
    ([det([B[0], B[0], B[1]], [0.9, 0.8, 0.7])], [gt(B[:2])]),
    ([det(B[:2], [0.5, 0.5]), det(B[2:3] + MISS, [0.6, 0.55])], [gt(B[:2]), gt(B[2:4])]),
    ([det([], []), det(B[:1], [0.3])], [gt(B[:1]), gt(B[:1])]),
    ([det(B[:3], [0.9, 0.8, 0.7], [0, 1, 0])], [gt(B[:3], [0, 1, 1])]),
    ([det([[0, 0, 10, 5], [0, 0, 10, 10]], [0.9, 0.8])], [gt(B[:1])]),
    ([det(MISS * 3 + B[:2], [0.9, 0.85, 0.8, 0.3, 0.2]), det(B[1:2], [0.95])], [gt(B[:2]), gt(B[1:3])]),
]


@pytest.mark.parametrize("case", range(len(CASES)))
@pytest.mark.parametrize("thr", [0.5, 0.75])
def test_matches_brute_force_evaluator(case, thr):
    dets, gts = CASES[case]
    for label in (0, 1):
        got = class_ap(dets, gts, label, thr)
        if not any(label in g["labels"] for g in gts):
            assert got is None
            continue
        assert got == pytest.approx(brute_force_ap(dets, gts, label, thr), abs=1e-12)


def test_hand_values():
    dets, gts = CASES[1]
    assert class_ap(dets, gts, 0, 0.5) == pytest.approx(0.5 + 0.5 * 2 / 3)  # hit, miss, hit
    dets, gts = CASES[2]
    assert class_ap(dets, gts, 0, 0.5) == pytest.approx(0.5 * 1 / 3)
    dets, gts = CASES[4]
    assert class_ap(dets, gts, 0, 0.5) == pytest.approx(0.5 + 0.5 * 2 / 3)  # duplicate counts as a false positive


def test_perfect_and_empty_predictions():
    gts = [gt(B[:2], [0, 1]), gt(B[2:], [1, 0])]
    perfect = [dict(g, scores=[1.0] * len(g["labels"])) for g in gts]
    report = evaluate_detections(perfect, gts, 2)
    assert report["ap50"] == 1.0 and report["ap"] == 1.0
    empty = [det([], []) for _ in gts]
    report = evaluate_detections(empty, gts, 2)
    assert report["ap50"] == 0.0 and report["ap"] == 0.0


def test_mask_ap():
    m = np.zeros((2, 8, 8), bool)
    m[0, :4, :4] = True
    m[1, 4:, 4:] = True
    gts = [{"boxes": [[0, 0, 4, 4], [4, 4, 8, 8]], "labels": [0, 0], "masks": list(m)}]
    dets = [{"boxes": [[0, 0, 4, 4], [4, 4, 8, 8]], "labels": [0, 0], "scores": [0.9, 0.8], "masks": [m[0], m[0]]}]
    report = evaluate_detections(dets, gts, 1, masks=True)
    assert report["ap50"] == 1.0 and report["mask_ap50"] == pytest.approx(0.5)


def test_ap_from_pr_envelope():
    assert ap_from_pr(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert ap_from_pr(np.array([0.0]), np.array([0.0])) == 0.0


def test_threshold_grid_and_classes_without_ground_truth():
    assert len(IOU_THRESHOLDS) == 10 and IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95
    dets, gts = CASES[0]
    assert mean_ap(dets, gts, 0.5, num_classes=3) == 1.0
