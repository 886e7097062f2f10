"""Box conversions and overlap measures, in numpy and as differentiable ops."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

AREA_EPS = 1e-7


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and union for every (a_i, b_j) pair of xyxy boxes."""
    area_a = np.maximum(box_area(a), AREA_EPS)
    area_b = np.maximum(box_area(b), AREA_EPS)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iou, union = pairwise_iou(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    enclose = np.maximum(wh[..., 0] * wh[..., 1], AREA_EPS)
    return iou - (enclose - union) / enclose


def elementwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of matching rows of two (N, 4) xyxy arrays."""
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = np.maximum(box_area(a), AREA_EPS) + np.maximum(box_area(b), AREA_EPS) - inter
    return inter / union


# -- differentiable --------------------------------------------------------------------

def t_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cxcy = T.getitem(b, (Ellipsis, slice(0, 2)))
    half = T.getitem(b, (Ellipsis, slice(2, 4))) * 0.5
    return T.concat([cxcy - half, cxcy + half], axis=-1)


def _cols(b: Tensor):
    return [T.getitem(b, (Ellipsis, i)) for i in range(4)]


def t_area(b: Tensor) -> Tensor:
    x0, y0, x1, y1 = _cols(b)
    return T.maximum(T.relu(x1 - x0) * T.relu(y1 - y0), AREA_EPS)


def t_giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of matching rows of xyxy boxes."""
    ax0, ay0, ax1, ay1 = _cols(a)
    bx0, by0, bx1, by1 = _cols(b)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    union = t_area(a) + t_area(b) - inter
    ew = T.maximum(ax1, bx1) - T.minimum(ax0, bx0)
    eh = T.maximum(ay1, by1) - T.minimum(ay0, by0)
    enclose = T.maximum(ew * eh, AREA_EPS)
    return inter / union - (enclose - union) / enclose
