"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def _project(out: Tensor, weights: np.ndarray | None) -> float:
    data = out.data.astype(np.float64)
    if weights is not None:
        data = data * weights
    return float(np.sum(data))


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, h: float = 1e-5,
                   weights: np.ndarray | None = None) -> np.ndarray:
    """d <weights, fn(*inputs)> / d inputs[index] by central differences; only forwards are used."""
    x = inputs[index]
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = _project(fn(*inputs), weights)
        flat[i] = orig - h
        minus = _project(fn(*inputs), weights)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                   weights: np.ndarray | None = None) -> list[np.ndarray | None]:
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    seed = np.ones(out.shape) if weights is None else weights
    out.backward(seed.astype(out.dtype))
    return [None if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    seed: int = 0) -> list[float]:
    """Relative error (analytic vs numeric) for each input that requires grad.

    Both sides differentiate ``<w, fn(*inputs)>`` for a fixed random ``w`` so
    that outputs with constant sums (softmax, normalizations) still get checked.
    """
    out_shape = fn(*inputs).shape
    weights = np.random.default_rng(seed).normal(size=out_shape)
    analytic = analytic_grads(fn, inputs, weights)
    errors = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numerical_grad(fn, inputs, i, h, weights)
        ana = analytic[i] if analytic[i] is not None else np.zeros_like(num)
        errors.append(relative_error(ana, num))
    return errors
