"""Set-prediction supervision: matching, detection losses and the extra terms."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .boxes import cxcywh_to_xyxy, elementwise_iou, pairwise_giou, t_cxcywh_to_xyxy, t_giou
from .errors import ConfigurationError, InfeasibleMatchError
from .tensor import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    seg: float = 3.0
    aware: float = 2.0
    token: float = 2.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigurationError(f"loss weight {name} must be non-negative, got {value}")


@dataclass(frozen=True)
class MatcherWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    matcher: MatcherWeights = field(default_factory=MatcherWeights)
    mode: str = "focal"  # focal | ce
    eos_coef: float = 0.1
    aux: bool = True
    aware_all_layers: bool = False

    def __post_init__(self):
        if self.mode not in ("focal", "ce"):
            raise ConfigurationError(f"classification mode must be 'focal' or 'ce', got {self.mode!r}")


# -- Hungarian matching ---------------------------------------------------------------

class MatchResult(NamedTuple):
    rows: np.ndarray   # ground-truth indices, ascending
    cols: np.ndarray   # prediction slots assigned to them
    cost: float


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injective assignment of the B rows (targets) to D columns (slots).

    Shortest augmenting paths with row/column potentials; O(B^2 D).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise InfeasibleMatchError(f"{n} targets cannot be matched injectively to {m} slots")
    if n == 0:
        return MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols_of_row[owner[j] - 1] = j - 1
    rows = np.arange(n)
    total = 0.0
    for r in rows:
        total += cost[r, cols_of_row[r]]
    return MatchResult(rows, cols_of_row, float(total))


def matching_cost(logits: np.ndarray, boxes: np.ndarray, labels: np.ndarray, gt_boxes: np.ndarray,
                  weights: MatcherWeights = MatcherWeights(), mode: str = "focal") -> np.ndarray:
    """(B_gt, D) cost built from class, L1 and GIoU terms for one image."""
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "focal":
        p = 1.0 / (1.0 + np.exp(-logits))
        neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * -np.log(1 - p + 1e-8)
        pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(p + 1e-8)
        cls = (pos - neg)[:, labels]
    else:
        z = logits - logits.max(-1, keepdims=True)
        prob = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        cls = -prob[:, labels]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    giou = pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    return (weights.l1 * l1 + weights.cls * cls - weights.giou * giou).T


# -- individual losses ---------------------------------------------------------------

def sigmoid_focal(logits: Tensor, targets: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise focal loss; ``targets`` may be soft labels in [0, 1]."""
    targets = np.asarray(targets, dtype=logits.dtype)
    p = T.sigmoid(logits)
    ce = T.bce_with_logits(logits, targets)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    modulator = T.power(T.clip(1.0 - p_t, 0.0, None), gamma)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets) if alpha >= 0 else 1.0
    return ce * modulator * alpha_t


def classification_loss(logits: Tensor, matches: Sequence[MatchResult], labels: Sequence[np.ndarray],
                        num_boxes: float, mode: str = "focal", eos_coef: float = 0.1) -> Tensor:
    """Focal (no background class, unmatched slots target all-zero) or weighted CE with background."""
    b, d, c = logits.shape
    if mode == "focal":
        target = np.zeros((b, d, c), dtype=logits.dtype)
        for i, (mt, lab) in enumerate(zip(matches, labels)):
            target[i, mt.cols, lab[mt.rows]] = 1.0
        return T.sum(sigmoid_focal(logits, target)) * (1.0 / num_boxes)
    # c includes the background class as the last logit
    target = np.full((b, d), c - 1, dtype=np.int64)
    for i, (mt, lab) in enumerate(zip(matches, labels)):
        target[i, mt.cols] = lab[mt.rows]
    class_w = np.ones(c)
    class_w[-1] = eos_coef
    w = class_w[target].astype(logits.dtype)
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.eye(c, dtype=logits.dtype)[target]
    nll = -T.sum(logp * onehot, axis=-1)
    return T.sum(nll * w) * (1.0 / float(w.sum()))


def _gather_matched(boxes: Tensor, matches: Sequence[MatchResult]) -> tuple[Tensor, np.ndarray]:
    b, d = boxes.shape[:2]
    flat = np.concatenate([i * d + mt.cols for i, mt in enumerate(matches)]).astype(np.int64)
    return T.take(T.reshape(boxes, (b * d,) + boxes.shape[2:]), flat, axis=0), flat


def box_losses(boxes: Tensor, matches: Sequence[MatchResult], gt_boxes: Sequence[np.ndarray],
               num_boxes: float) -> tuple[Tensor, Tensor]:
    """L1 and GIoU losses over matched pairs, each summed and divided by ``num_boxes``."""
    pred, _ = _gather_matched(boxes, matches)
    tgt = np.concatenate([g[mt.rows] for g, mt in zip(gt_boxes, matches)]).astype(boxes.dtype).reshape(-1, 4)
    if pred.shape[0] == 0:
        zero = T.sum(boxes) * 0.0
        return zero, zero
    l1 = T.sum(T.abs(pred - tgt)) * (1.0 / num_boxes)
    giou = giou_loss(pred, Tensor(tgt))
    return l1, T.sum(giou) * (1.0 / num_boxes)


def giou_loss(pred_cxcywh: Tensor, tgt_cxcywh: Tensor) -> Tensor:
    """Per-pair 1 - GIoU for cxcywh boxes; values lie in [0, 2]."""
    return 1.0 - t_giou(t_cxcywh_to_xyxy(pred_cxcywh), t_cxcywh_to_xyxy(tgt_cxcywh))


def iou_aware_loss(iou_logits: Tensor, boxes: Tensor, matches: Sequence[MatchResult],
                   gt_boxes: Sequence[np.ndarray]) -> Tensor:
    """Mean BCE between predicted IoU scores and the actual IoU of matched boxes."""
    logits, _ = _gather_matched(T.reshape(iou_logits, iou_logits.shape[:2]), matches)
    if logits.shape[0] == 0:
        return T.sum(iou_logits) * 0.0
    pred, _ = _gather_matched(boxes, matches)
    tgt = np.concatenate([g[mt.rows] for g, mt in zip(gt_boxes, matches)]).reshape(-1, 4)
    iou = elementwise_iou(cxcywh_to_xyxy(pred.data), cxcywh_to_xyxy(tgt))
    return T.mean(T.bce_with_logits(logits, iou.astype(logits.dtype)))


def segmentation_loss(mask_pred: Tensor, matches: Sequence[MatchResult], gt_vectors: Sequence[np.ndarray],
                      num_boxes: float) -> Tensor:
    """Per-object mean absolute coefficient error, summed over objects / ``num_boxes``."""
    pred, _ = _gather_matched(mask_pred, matches)
    if pred.shape[0] == 0:
        return T.sum(mask_pred) * 0.0
    tgt = np.concatenate([g[mt.rows] for g, mt in zip(gt_vectors, matches)]).astype(mask_pred.dtype)
    return T.sum(T.mean(T.abs(pred - tgt), axis=-1)) * (1.0 / num_boxes)


def downsample_labels(class_masks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-weighted (B, H, W, C) -> (B, h, w, C) soft labels; H, W must be multiples of h, w."""
    b, hh, ww, c = class_masks.shape
    if hh % h or ww % w:
        raise ValueError(f"label map {hh}x{ww} is not a multiple of {h}x{w}")
    return class_masks.reshape(b, h, hh // h, w, ww // w, c).mean(axis=(2, 4))


def token_labeling_loss(token_logits: Sequence[Tensor], class_masks: np.ndarray) -> Tensor:
    """Mean over levels of (mean over tokens of the class-summed focal loss)."""
    total = None
    for logits in token_logits:
        b, h, w, c = logits.shape
        target = downsample_labels(class_masks, h, w).astype(logits.dtype)
        lvl = T.sum(sigmoid_focal(logits, target)) * (1.0 / (b * h * w))
        total = lvl if total is None else total + lvl
    return total * (1.0 / len(token_logits))


# -- assembly ---------------------------------------------------------------------------

@dataclass
class Targets:
    """Per-image ground truth: labels, cxcywh boxes, optional mask vectors."""

    labels: list[np.ndarray]
    boxes: list[np.ndarray]
    mask_vectors: list[np.ndarray] | None = None
    class_masks: np.ndarray | None = None  # (B, H, W, C) union masks at the padded input size

    @property
    def num_boxes(self) -> float:
        return float(max(sum(len(l) for l in self.labels), 1))


def match_layer(logits: Tensor, boxes: Tensor, targets: Targets, cfg: LossConfig) -> list[MatchResult]:
    out = []
    for i in range(logits.shape[0]):
        lab = targets.labels[i]
        if len(lab) == 0:
            out.append(MatchResult(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0))
            continue
        cost = matching_cost(logits.data[i], boxes.data[i].astype(np.float64), lab, targets.boxes[i],
                             cfg.matcher, cfg.mode)
        out.append(hungarian_match(cost))
    return out


def detection_loss(logits: Tensor, boxes: Tensor, matches, targets: Targets, cfg: LossConfig) -> dict[str, Tensor]:
    n = targets.num_boxes
    cls = classification_loss(logits, matches, targets.labels, n, cfg.mode, cfg.eos_coef)
    l1, giou = box_losses(boxes, matches, targets.boxes, n)
    return {"cls": cls, "l1": l1, "giou": giou}


def joint_loss(layer_outputs: Sequence[dict], targets: Targets, cfg: LossConfig = LossConfig(),
               extras: dict | None = None) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-layer detection losses plus weighted extra terms.

    ``layer_outputs`` are dicts with ``logits`` and ``boxes`` (and, for the
    final layer, optionally ``iou_logits`` and ``masks``). ``extras`` may hold
    ``token_logits`` (list of per-level maps). Matching is recomputed per layer.
    """
    w = cfg.weights
    layers = list(layer_outputs) if cfg.aux else [layer_outputs[-1]]
    parts: dict[str, float] = {}
    total = None
    last_matches = None
    for li, out in enumerate(layers):
        matches = match_layer(out["logits"], out["boxes"], targets, cfg)
        det = detection_loss(out["logits"], out["boxes"], matches, targets, cfg)
        term = det["cls"] * w.cls + det["l1"] * w.l1 + det["giou"] * w.giou
        total = term if total is None else total + term
        for k, v in det.items():
            parts[k] = parts.get(k, 0.0) + float(v.data)
        is_last = li == len(layers) - 1
        if "iou_logits" in out and (is_last or cfg.aware_all_layers) and w.aware > 0:
            aware = iou_aware_loss(out["iou_logits"], out["boxes"], matches, targets.boxes)
            total = total + aware * w.aware
            parts["aware"] = parts.get("aware", 0.0) + float(aware.data)
        if is_last:
            last_matches = matches
    final = layers[-1]
    if "masks" in final and targets.mask_vectors is not None and w.seg > 0:
        seg = segmentation_loss(final["masks"], last_matches, targets.mask_vectors, targets.num_boxes)
        total = total + seg * w.seg
        parts["seg"] = float(seg.data)
    if extras and extras.get("token_logits") is not None and targets.class_masks is not None and w.token > 0:
        tok = token_labeling_loss(extras["token_logits"], targets.class_masks)
        total = total + tok * w.token
        parts["token"] = float(tok.data)
    parts["total"] = float(total.data)
    return total, parts


def drop_degenerate(labels: np.ndarray, boxes: np.ndarray, *others, min_size: float = 1e-6):
    """Remove zero-area boxes (with a warning) and the matching rows of ``others``."""
    keep = (boxes[:, 2] > min_size) & (boxes[:, 3] > min_size)
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} degenerate box(es)", stacklevel=2)
    return (labels[keep], boxes[keep]) + tuple(o[keep] if o is not None else None for o in others)
