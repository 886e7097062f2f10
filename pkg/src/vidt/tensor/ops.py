"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects. Backward closures
return one gradient per parent (``None`` where no gradient flows).
Reductions run in numpy's fixed order, so repeated forwards are
bit-identical.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from ..errors import ConfigurationError, DimensionError
from .core import Tensor, as_tensor, get_default_dtype

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def minimum(a, b) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    out = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return Tensor._from_op(out, (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = _t(a)
    b = _t(b, a)

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)

    return Tensor._from_op(np.where(cond, a.data, b.data), (a, b), backward)


# -- activations -------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (a,), backward)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - _np_sigmoid(x)),))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits against a (possibly soft) constant target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return Tensor._from_op(out, (logits,), lambda g: (g * (_np_sigmoid(x) - t),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        s = gx.sum(axis=axis, keepdims=True)
        np.subtract(g, s, out=gx)
        gx *= out
        return (gx,)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


# -- reductions and shape manipulation ---------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(n, 1))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or isinstance(i, np.integer) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    if isinstance(idx, tuple):
        idx = tuple(i.data if isinstance(i, Tensor) else i for i in idx)
    out = a.data[idx]
    basic = _is_basic_index(idx)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(out, copy=True) if basic else out, (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; gradient scatters back with accumulation."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)
    shape, dtype = a.shape, a.dtype
    ax = axis % a.ndim

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, ax, 0).reshape((indices.size,) + moved.shape[1:])
        flat_idx = indices.reshape(-1)
        if np.unique(flat_idx).size == flat_idx.size:
            moved[flat_idx] += gm
        else:
            np.add.at(moved, flat_idx, gm)
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward)


def repeat_last(a: Tensor, times: int) -> Tensor:
    """Tile the last dimension: ``[a1..ad] -> [a1..ad, a1..ad, ...]``."""
    out = np.concatenate([a.data] * times, axis=-1)
    d = a.shape[-1]

    def backward(g):
        return (g.reshape(g.shape[:-1] + (times, d)).sum(axis=-2),)

    return Tensor._from_op(out, (a,), backward)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows ``numpy.pad``."""
    pad_width = [tuple(p) for p in pad_width]
    if not any(p != (0, 0) for p in pad_width):
        return a
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return Tensor._from_op(out, (a,), lambda g: (g[sl],))


def roll(a: Tensor, shift, axis) -> Tensor:
    out = np.roll(a.data, shift, axis=axis)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return Tensor._from_op(out, (a,), lambda g: (np.roll(g, neg_shift, axis=axis),))


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _t(a)
    b = _t(b, a)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc
    _record_matmul(a.shape, b.shape, out.shape)
    a2 = a.ndim == 1
    b2 = b.ndim == 1

    def backward(g):
        A = a.data[None, :] if a2 else a.data
        B = b.data[:, None] if b2 else b.data
        G = g
        if a2:
            G = np.expand_dims(G, -2)
        if b2:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            if a2:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            if b2:
                gb = gb[..., :, 0]
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    _record_matmul(x2.shape, weight.shape, out.shape)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._from_op(out, parents, backward)


# -- normalization -----------------------------------------------------------------

def _normalize_backward(g_hat, xhat, rstd, axes, n):
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return rstd * (g_hat - s1 / n - xhat * s2 / n)


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply the affine ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma is not None and gamma.shape != (d,):
        raise DimensionError(f"layer_norm gamma {gamma.shape} does not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (x, gamma, beta) if p is not None)

    def backward(g):
        grads = []
        g_hat = g if gamma is None else g * gamma.data
        grads.append(_normalize_backward(g_hat, xhat, rstd, -1, d) if x.requires_grad else None)
        red = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=red) if beta.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, parents, backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Group normalization for channels-last maps (B, ..., C)."""
    c = x.shape[-1]
    if c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    b = x.shape[0]
    xr = x.data.reshape(b, -1, groups, c // groups)
    axes = (1, 3)
    n = xr.shape[1] * xr.shape[3]
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(x.shape)
    out = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (x, gamma, beta) if p is not None)

    def backward(g):
        grads = []
        g_hat = g if gamma is None else g * gamma.data
        if x.requires_grad:
            gx = _normalize_backward(g_hat.reshape(xr.shape), xhat.reshape(xr.shape), rstd, axes, n)
            grads.append(gx.reshape(x.shape))
        else:
            grads.append(None)
        red = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=red) if beta.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, parents, backward)


# -- stochastic --------------------------------------------------------------------

def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,))


# -- convolution -------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: str = "same") -> Tensor:
    """Cross-correlation on channels-last maps.

    ``x`` is (B, H, W, Cin) and ``kernel`` is (kh, kw, Cin, Cout). Only 1x1 and
    3x3 kernels with stride 1 and same padding are supported.
    """
    kh, kw, cin, cout = kernel.shape
    if (kh, kw) not in ((1, 1), (3, 3)):
        raise ConfigurationError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if stride != 1 or pad != "same":
        raise ConfigurationError("conv2d supports stride 1 with same padding only")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    if kh == 1:
        return linear(x, reshape(kernel, (cin, cout)), bias)
    b, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # B,H,W,C,3,3
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * cin)
    wmat = kernel.data.reshape(9 * cin, cout)
    out = cols @ wmat
    _record_matmul(cols.shape, wmat.shape, out.shape)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, h, w, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(b, h, w, 3, 3, cin)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, 1:-1, 1:-1, :]
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, (g2.sum(axis=0) if bias.requires_grad else None)

    return Tensor._from_op(out, parents, backward)


# -- resampling --------------------------------------------------------------------

def _corner_setup(points: np.ndarray, h: int, w: int):
    x = points[..., 0]
    y = points[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        flat = np.where(valid, yi * w + xi, 0)
        corners.append((flat, valid))
    return fx, fy, corners


def bilinear_sample(maps: Tensor, points: Tensor) -> Tensor:
    """Sample channels-last maps at fractional pixel coordinates.

    ``maps`` is (G, H, W, C); ``points`` is (G, N, 2) holding (x, y) with
    integer values landing exactly on grid cells. Reads outside the map are
    zero. Differentiable with respect to both the maps and the points.
    """
    g_, h, w, c = maps.shape
    if points.shape[0] != g_ or points.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: maps {maps.shape} vs points {points.shape}")
    n = points.shape[1]
    pts = points.data
    fx, fy, corners = _corner_setup(pts, h, w)
    flat_map = maps.data.reshape(g_ * h * w, c)
    base = (np.arange(g_) * (h * w))[:, None]
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    rows = []
    gathered = []  # corner values, kept for the point gradient
    out = np.zeros((g_, n, c), dtype=maps.dtype)
    for (flat, valid), wt in zip(corners, wts):
        idx = (flat + base).reshape(-1)
        wv = (wt * valid).astype(maps.dtype)
        rows.append((idx, wv))
        v = flat_map[idx].reshape(g_, n, c)
        if points.requires_grad:
            gathered.append((v, valid))
        out += v * wv[..., None]

    def backward(g):
        gmap = gpts = None
        if maps.requires_grad:
            idx_all = np.concatenate([r[0] for r in rows])
            w_all = np.concatenate([r[1].reshape(-1) for r in rows])
            col_all = np.tile(np.arange(g_ * n), 4)
            scatter = sp.csr_matrix((w_all, (idx_all, col_all)), shape=(g_ * h * w, g_ * n))
            gmap = np.asarray(scatter @ g.reshape(g_ * n, c)).reshape(maps.shape).astype(maps.dtype, copy=False)
        if points.requires_grad:
            v00, v01, v10, v11 = [np.einsum("gnc,gnc->gn", v, g) * valid for v, valid in gathered]
            dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gpts = np.stack([dx, dy], axis=-1).astype(points.dtype, copy=False)
        return gmap, gpts

    return Tensor._from_op(out, (maps, points), backward)


def _interp_matrix(n_out: int, n_in: int, mode: str, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        src = np.minimum(np.floor(np.arange(n_out) * n_in / n_out).astype(np.int64), n_in - 1)
        m[np.arange(n_out), src] = 1.0
        return m
    if mode != "bilinear":
        raise ConfigurationError(f"unknown interpolation mode {mode!r}")
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize channels-last maps (B, h, w, C) to ``size`` = (H, W).

    Bilinear follows the half-pixel-centre convention (align_corners=False).
    """
    b, h, w, c = x.shape
    H, W = size
    if (H, W) == (h, w):
        return x
    ry = _interp_matrix(H, h, mode, x.dtype)
    rx = _interp_matrix(W, w, mode, x.dtype)
    out = np.einsum("oh,bhwc->bowc", ry, x.data, optimize=True)
    out = np.einsum("pw,bowc->bopc", rx, out, optimize=True)

    def backward(g):
        t = np.einsum("pw,bopc->bowc", rx, g, optimize=True)
        return (np.einsum("oh,bowc->bhwc", ry, t, optimize=True),)

    return Tensor._from_op(out, (x,), backward)


# -- encodings (constants, no gradient) --------------------------------------------

def sine_encoding_2d(h: int, w: int, dim: int, temperature: float = 10000.0,
                     valid: tuple[int, int] | None = None, dtype=None) -> np.ndarray:
    """Normalized 2D sine/cosine table of shape (h, w, dim).

    The first half of the channels encodes the row, the second half the column.
    ``valid`` restricts the normalization to the unpadded (rows, cols) region.
    """
    if dim % 4:
        raise ConfigurationError(f"sine encoding needs dim divisible by 4, got {dim}")
    dtype = dtype or get_default_dtype()
    vh, vw = valid if valid is not None else (h, w)
    npf = dim // 2
    scale = 2 * math.pi
    eps = 1e-6
    y = np.minimum(np.arange(1, h + 1, dtype=np.float64), vh) / (vh + eps) * scale
    x = np.minimum(np.arange(1, w + 1, dtype=np.float64), vw) / (vw + eps) * scale
    dim_t = temperature ** (2 * (np.arange(npf) // 2) / npf)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py = np.stack([np.sin(py[:, 0::2]), np.cos(py[:, 1::2])], axis=2).reshape(h, npf)
    px = np.stack([np.sin(px[:, 0::2]), np.cos(px[:, 1::2])], axis=2).reshape(w, npf)
    table = np.concatenate([np.broadcast_to(py[:, None, :], (h, w, npf)),
                            np.broadcast_to(px[None, :, :], (h, w, npf))], axis=-1)
    return table.astype(dtype)


def sine_encoding_1d(n: int, dim: int, temperature: float = 10000.0, dtype=None) -> np.ndarray:
    dtype = dtype or get_default_dtype()
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / temperature ** (2 * (i // 2) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


# -- matmul instrumentation for the independent MAC audit ---------------------------

_matmul_hooks: list = []


def _record_matmul(a_shape, b_shape, out_shape) -> None:
    if not _matmul_hooks:
        return
    k = a_shape[-1]
    macs = int(np.prod(out_shape)) * int(k)
    for hook in _matmul_hooks:
        hook(macs)


class count_matmul_macs:
    """Context manager summing multiply-accumulates of every matmul dispatched."""

    def __init__(self):
        self.total = 0

    def _hook(self, macs):
        self.total += macs

    def __enter__(self):
        _matmul_hooks.append(self._hook)
        return self

    def __exit__(self, *exc):
        _matmul_hooks.remove(self._hook)
        return False


# -- operator overloads --------------------------------------------------------------

def _install_operators() -> None:
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(_t(b, a), a)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: sub(_t(b, a), a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(_t(b, a), a)
    T.__truediv__ = lambda a, b: div(a, b)
    T.__rtruediv__ = lambda a, b: div(_t(b, a), a)
    T.__neg__ = lambda a: neg(a)
    T.__pow__ = lambda a, e: power(a, e)
    T.__matmul__ = lambda a, b: matmul(a, b)
    T.__getitem__ = lambda a, idx: getitem(a, idx)
    T.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    T.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    T.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    T.exp = lambda a: exp(a)
    T.log = lambda a: log(a)
    T.sigmoid = lambda a: sigmoid(a)
    T.relu = lambda a: relu(a)
    T.T = property(lambda a: transpose(a))


_install_operators()
