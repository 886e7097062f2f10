"""Instance masks as truncated DCT coefficient vectors.

A mask is cropped to its box, resampled to an m x m square S, transformed
with the orthonormal DCT-II matrix A as F = A S A^T, and the first n
coefficients in zigzag order form the vector. Decoding zero-fills the rest,
inverts with A^T F A, and thresholds at 0.5.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .tensor import MLP, Module, Tensor

DEFAULT_RESOLUTION = 64
DEFAULT_COEFFS = 256


@lru_cache(maxsize=8)
def dct_matrix(m: int) -> np.ndarray:
    """Orthonormal DCT-II matrix: A[k, i] = c_k cos(pi (2i + 1) k / 2m)."""
    k = np.arange(m)[:, None]
    i = np.arange(m)[None, :]
    a = np.cos(np.pi * (2 * i + 1) * k / (2 * m))
    a[0] *= np.sqrt(1.0 / m)
    a[1:] *= np.sqrt(2.0 / m)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=8)
def zigzag_indices(m: int) -> np.ndarray:
    """(m*m, 2) JPEG-style zigzag order over an m x m grid, starting at (0, 0)."""
    order = []
    for s in range(2 * m - 1):
        diag = [(i, s - i) for i in range(max(0, s - m + 1), min(s, m - 1) + 1)]
        order.extend(diag if s % 2 else diag[::-1])
    out = np.array(order, dtype=np.int64)
    out.setflags(write=False)
    return out


def dct_encode(mask: np.ndarray, n: int = DEFAULT_COEFFS) -> np.ndarray:
    """First ``n`` zigzag coefficients of A S A^T for a square m x m mask."""
    m = mask.shape[0]
    if mask.shape != (m, m):
        raise ConfigurationError(f"mask must be square, got {mask.shape}")
    if not 0 < n <= m * m:
        raise ConfigurationError(f"coefficient count {n} outside 1..{m * m}")
    a = dct_matrix(m)
    f = a @ np.asarray(mask, dtype=np.float64) @ a.T
    zz = zigzag_indices(m)[:n]
    return f[zz[:, 0], zz[:, 1]]


def dct_decode(vector: np.ndarray, m: int = DEFAULT_RESOLUTION, threshold: float | None = 0.5) -> np.ndarray:
    """Inverse of :func:`dct_encode`; returns a bool mask, or reals if ``threshold`` is None."""
    vector = np.asarray(vector, dtype=np.float64)
    n = vector.shape[-1]
    if n > m * m:
        raise ConfigurationError(f"coefficient count {n} exceeds {m}x{m}")
    zz = zigzag_indices(m)[:n]
    f = np.zeros((m, m))
    f[zz[:, 0], zz[:, 1]] = vector
    a = dct_matrix(m)
    s = a.T @ f @ a
    return s if threshold is None else s >= threshold


def naive_dct2(s: np.ndarray) -> np.ndarray:
    """Direct double-sum orthonormal 2D DCT-II, O(m^4); reference only."""
    m = s.shape[0]
    out = np.zeros((m, m))
    for u in range(m):
        cu = np.sqrt((1.0 if u == 0 else 2.0) / m)
        for v in range(m):
            cv = np.sqrt((1.0 if v == 0 else 2.0) / m)
            acc = 0.0
            for x in range(m):
                for y in range(m):
                    acc += s[x, y] * np.cos(np.pi * (2 * x + 1) * u / (2 * m)) * np.cos(np.pi * (2 * y + 1) * v / (2 * m))
            out[u, v] = cu * cv * acc
    return out


def crop_resample(mask: np.ndarray, box_xyxy, m: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Bilinearly sample the box region of a full-image mask on an m x m grid."""
    x0, y0, x1, y1 = [float(v) for v in box_xyxy]
    xs = x0 + (np.arange(m) + 0.5) * (x1 - x0) / m - 0.5
    ys = y0 + (np.arange(m) + 0.5) * (y1 - y0) / m - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(mask.astype(np.float64), [yy, xx], order=1, mode="nearest")


def encode_instance(mask: np.ndarray, box_xyxy, m: int = DEFAULT_RESOLUTION, n: int = DEFAULT_COEFFS) -> np.ndarray:
    """Box-cropped, resampled and binarized mask -> coefficient vector."""
    return dct_encode((crop_resample(mask, box_xyxy, m) >= 0.5).astype(np.float64), n)


def paste_instance(vector: np.ndarray, box_xyxy, image_hw: tuple[int, int], m: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Decode a vector and paste it into a full-image bool mask at ``box_xyxy`` (pixels)."""
    h, w = image_hw
    square = dct_decode(vector, m, threshold=None)
    x0, y0, x1, y1 = [float(v) for v in box_xyxy]
    out = np.zeros((h, w), dtype=bool)
    bw, bh = max(x1 - x0, 1e-6), max(y1 - y0, 1e-6)
    c0, c1 = max(int(np.floor(x0)), 0), min(int(np.ceil(x1)), w)
    r0, r1 = max(int(np.floor(y0)), 0), min(int(np.ceil(y1)), h)
    if c1 <= c0 or r1 <= r0:
        return out
    # pixel centres mapped into the square's index space
    us = ((np.arange(c0, c1) + 0.5) - x0) * m / bw - 0.5
    vs = ((np.arange(r0, r1) + 0.5) - y0) * m / bh - 0.5
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    vals = ndimage.map_coordinates(square, [vv, uu], order=1, mode="nearest")
    inside = (vv >= -0.5) & (vv <= m - 0.5) & (uu >= -0.5) & (uu <= m - 0.5)
    out[r0:r1, c0:c1] = (vals >= 0.5) & inside
    return out


class MaskHead(Module):
    """FFN from final DET embeddings to coefficient vectors."""

    def __init__(self, width: int, n: int, rng: np.random.Generator, dtype=None):
        self.n = n
        self.ffn = MLP([width, width, n], rng, dtype=dtype)

    def forward(self, det: Tensor) -> Tensor:
        return self.ffn(det)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0
