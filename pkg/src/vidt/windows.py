"""Window bookkeeping for local attention: partition, reverse, shift masks, bias indices."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9


def window_partition(x: Tensor, k: int) -> Tensor:
    """(B, H, W, C) with H, W multiples of ``k`` -> (B * nH * nW, k*k, C)."""
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"map {h}x{w} is not a multiple of window {k}")
    x = T.reshape(x, (b, h // k, k, w // k, k, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // k) * (w // k), k * k, c))


def window_reverse(windows: Tensor, k: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // k) * (w // k))
    x = T.reshape(windows, (b, h // k, w // k, k, k, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def partition_array(a: np.ndarray, k: int) -> np.ndarray:
    """Numpy twin of :func:`window_partition` for (B, H, W, ...) constants."""
    b, h, w = a.shape[:3]
    rest = a.shape[3:]
    a = a.reshape((b, h // k, k, w // k, k) + rest)
    a = np.moveaxis(a, 2, 3)
    return a.reshape((b * (h // k) * (w // k), k * k) + rest)


def effective_window(h: int, w: int, k: int, shifted: bool) -> tuple[int, int]:
    """Window size and shift actually used on an h x w map.

    A map that fits in one window along both axes gets a single window and no
    shift, as in Swin when the resolution drops to the window size.
    """
    if h <= k and w <= k:
        return max(h, w), 0
    return k, (k // 2 if shifted else 0)


def padded_size(n: int, k: int) -> int:
    return -(-n // k) * k


@lru_cache(maxsize=64)
def shift_region_mask(hp: int, wp: int, k: int, shift: int) -> np.ndarray:
    """Additive (nW, k*k, k*k) mask keeping attention inside true shifted windows."""
    nw = (hp // k) * (wp // k)
    if shift == 0:
        return np.zeros((nw, k * k, k * k))
    img = np.zeros((1, hp, wp), dtype=np.int64)
    label = 0
    for hs in (slice(0, -k), slice(-k, -shift), slice(-shift, None)):
        for ws in (slice(0, -k), slice(-k, -shift), slice(-shift, None)):
            img[:, hs, ws] = label
            label += 1
    win = partition_array(img, k)  # (nW, k*k)
    return np.where(win[:, None, :] != win[:, :, None], MASK_VALUE, 0.0)


@lru_cache(maxsize=16)
def relative_position_index(k_eff: int, k_table: int) -> np.ndarray:
    """(k_eff^2, k_eff^2) indices into a (2*k_table - 1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(k_eff), np.arange(k_eff), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    span = 2 * k_table - 1
    return (rel[0] + k_table - 1) * span + (rel[1] + k_table - 1)


def valid_mask(batch_sizes: list[tuple[int, int]], h: int, w: int) -> np.ndarray:
    """(B, h, w) boolean map, True inside each image's unpadded region."""
    out = np.zeros((len(batch_sizes), h, w), dtype=bool)
    for i, (vh, vw) in enumerate(batch_sizes):
        out[i, :vh, :vw] = True
    return out
