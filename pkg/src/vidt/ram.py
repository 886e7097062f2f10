"""Reconfigured attention: windowed PATCH x PATCH, global DET x DET, and DET x PATCH.

All three kernels in a block share one qkv projection and one output
projection. When cross-attention is active, DET x DET and DET x PATCH are
bound into a single softmax over the concatenated keys ``[DET_K, PATCH_K]``.

Every kernel can report its multiply-accumulate counts to a
:class:`FlopLedger`, keyed by attention type and stage.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Linear, Module, Parameter, Tensor
from .tensor.nn import trunc_normal
from .windows import (
    MASK_VALUE,
    effective_window,
    padded_size,
    partition_array,
    relative_position_index,
    shift_region_mask,
    window_partition,
    window_reverse,
)

LOGIT_CLIP = 50.0
ATTENTION_TYPES = ("patch_patch", "det_det", "det_patch", "joint_global")
ENCODING_MODES = ("none", "pre_addition", "post_addition")
ENCODING_KINDS = ("sinusoidal", "learnable")


@dataclass(frozen=True)
class SpatialEncodingPolicy:
    """Where the PATCH spatial encoding enters the cross-attention keys."""

    mode: str = "pre_addition"
    kind: str = "sinusoidal"

    def __post_init__(self):
        if self.mode not in ENCODING_MODES:
            raise ConfigurationError(f"spatial encoding mode must be one of {ENCODING_MODES}, got {self.mode!r}")
        if self.kind not in ENCODING_KINDS:
            raise ConfigurationError(f"spatial encoding kind must be one of {ENCODING_KINDS}, got {self.kind!r}")


# -- MAC bookkeeping ----------------------------------------------------------------

class FlopEvent(NamedTuple):
    attention_type: str
    stage: int
    kernel: str  # qkv | qk | av | out | key_proj | value_proj
    macs: int


class FlopLedger:
    """Multiply-accumulate counts recorded at kernel dispatch."""

    def __init__(self, events: Iterable[FlopEvent] = ()):
        self.events: list[FlopEvent] = list(events)

    def record(self, attention_type: str, stage: int, kernel: str, macs: int) -> None:
        if attention_type not in ATTENTION_TYPES:
            raise ValueError(f"unknown attention type {attention_type!r}")
        self.events.append(FlopEvent(attention_type, int(stage), kernel, int(macs)))

    def counts(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = defaultdict(int)
        for e in self.events:
            out[(e.attention_type, e.stage)] += e.macs
        return dict(out)

    def kernel_counts(self) -> dict[tuple[str, int, str], int]:
        out: dict[tuple[str, int, str], int] = defaultdict(int)
        for e in self.events:
            out[(e.attention_type, e.stage, e.kernel)] += e.macs
        return dict(out)

    def total(self, attention_type: str | None = None) -> int:
        return sum(e.macs for e in self.events if attention_type in (None, e.attention_type))

    def rows(self) -> list[tuple[str, int, int]]:
        order = {t: i for i, t in enumerate(ATTENTION_TYPES)}
        items = sorted(self.counts().items(), key=lambda kv: (order[kv[0][0]], kv[0][1]))
        return [(kind, stage, macs) for (kind, stage), macs in items]

    def to_text(self, sep: str = "\t") -> str:
        lines = [sep.join(("attention_type", "stage", "macs"))]
        lines += [sep.join((k, str(s), str(m))) for k, s, m in self.rows()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, sep: str = "\t") -> "FlopLedger":
        ledger = cls()
        for line in text.strip().splitlines()[1:]:
            kind, stage, macs = line.split(sep)
            ledger.record(kind, int(stage), "total", int(macs))
        return ledger


def count_flops(trace: Iterable[FlopEvent]) -> FlopLedger:
    """Aggregate a recorded op trace into a ledger (one row per type and stage)."""
    ledger = FlopLedger()
    for kind, stage, kernel, macs in trace:
        ledger.record(kind, stage, kernel, macs)
    return ledger


def _rec(ledger: FlopLedger | None, kind: str, stage: int, kernel: str, macs: int) -> None:
    if ledger is not None:
        ledger.record(kind, stage, kernel, macs)


# -- shared projections -------------------------------------------------------------

class RamProjections(Module):
    """One qkv and one output projection serving all three attention types."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=None):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, init="trunc_normal", dtype=dtype)
        self.out = Linear(dim, dim, rng, init="trunc_normal", dtype=dtype)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.dim // self.heads)

    def part(self, x: Tensor, which: slice) -> Tensor:
        """Apply a column slice of the qkv projection (e.g. only keys)."""
        w = T.getitem(self.qkv.weight, (slice(None), which))
        b = T.getitem(self.qkv.bias, which)
        return T.linear(x, w, b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., N, C) -> (..., heads, N, C/heads)."""
    *lead, n, c = x.shape
    x = T.reshape(x, tuple(lead) + (n, heads, c // heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, N, hd) -> (..., N, heads*hd)."""
    x = T.swapaxes(x, -2, -3)
    *lead, n, h, hd = x.shape
    return T.reshape(x, tuple(lead) + (n, h * hd))


def _clip_default(x: Tensor) -> bool:
    return x.dtype == np.float32


def _softmax_attend(q: Tensor, k: Tensor, v: Tensor, additive=None, clip: bool = False):
    logits = T.matmul(q, T.swapaxes(k, -1, -2))
    if clip:
        logits = T.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
    if additive is not None:
        logits = logits + additive
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v), weights


# -- PATCH x PATCH ------------------------------------------------------------------

def relative_bias(table: Tensor, k_eff: int, k_table: int) -> Tensor:
    """(heads, k_eff^2, k_eff^2) bias gathered from a (2k-1)^2 x heads table."""
    idx = relative_position_index(k_eff, k_table)
    n = k_eff * k_eff
    bias = T.take(table, idx.reshape(-1), axis=0)
    return T.transpose(T.reshape(bias, (n, n, table.shape[-1])), (2, 0, 1))


def patch_patch_attention(x: Tensor, proj: RamProjections, bias_table: Tensor, window: int, shifted: bool = False,
                          valid: np.ndarray | None = None, ledger: FlopLedger | None = None, stage: int = 0,
                          qkv: Tensor | None = None, clip: bool | None = None) -> Tensor:
    """Windowed multi-head self-attention over a (B, H, W, C) map.

    ``valid`` is a (B, H, W) boolean map; keys outside it are masked. Shifted
    blocks cyclically roll the map by half a window and mask cross-region pairs.
    Returns the output-projected (B, H, W, C) map.
    """
    b, h, w, c = x.shape
    heads = proj.heads
    clip = _clip_default(x) if clip is None else clip
    if qkv is None:
        qkv = proj.qkv(x)
        _rec(ledger, "patch_patch", stage, "qkv", 3 * c * c * b * h * w)
    k_table = (int(round(math.sqrt(bias_table.shape[0]))) + 1) // 2
    k, shift = effective_window(h, w, window, shifted)
    hp, wp = padded_size(h, k), padded_size(w, k)
    qkv = T.pad(qkv, [(0, 0), (0, hp - h), (0, wp - w), (0, 0)])
    keep = np.ones((b, h, w), dtype=bool) if valid is None else valid
    keep = np.pad(keep, [(0, 0), (0, hp - h), (0, wp - w)])
    if shift:
        qkv = T.roll(qkv, (-shift, -shift), axis=(1, 2))
        keep = np.roll(keep, (-shift, -shift), axis=(1, 2))
    nw = (hp // k) * (wp // k)
    n = k * k
    wins = T.reshape(window_partition(qkv, k), (b, nw, n, 3 * c))
    q = split_heads(T.getitem(wins, (Ellipsis, slice(0, c))), heads) * proj.scale
    kk = split_heads(T.getitem(wins, (Ellipsis, slice(c, 2 * c))), heads)
    v = split_heads(T.getitem(wins, (Ellipsis, slice(2 * c, 3 * c))), heads)

    additive = relative_bias(bias_table, k, k_table)  # heads, n, n
    dtype = x.dtype
    region = shift_region_mask(hp, wp, k, shift).astype(dtype)[:, None]  # nW, 1, n, n
    keymask = np.where(partition_array(keep, k), 0.0, MASK_VALUE).astype(dtype)  # B*nW, n
    fixed = region[None] + keymask.reshape(b, nw, 1, 1, n)
    additive = additive + Tensor(fixed)
    out, _ = _softmax_attend(q, kk, v, additive, clip)
    _rec(ledger, "patch_patch", stage, "qk", b * nw * n * n * c)
    _rec(ledger, "patch_patch", stage, "av", b * nw * n * n * c)

    out = T.reshape(merge_heads(out), (b * nw, n, c))
    out = window_reverse(out, k, hp, wp)
    if shift:
        out = T.roll(out, (shift, shift), axis=(1, 2))
    if hp != h or wp != w:
        out = T.getitem(out, (slice(None), slice(0, h), slice(0, w)))
    _rec(ledger, "patch_patch", stage, "out", c * c * b * h * w)
    return proj.out(out)


# -- DET x DET -----------------------------------------------------------------------

def det_det_attention(det: Tensor, det_pos, proj: RamProjections, ledger: FlopLedger | None = None,
                      stage: int = 0, clip: bool | None = None) -> Tensor:
    """Global self-attention over (B, D, C) DET tokens.

    The learnable DET encoding is added to the query/key inputs only.
    """
    b, d, c = det.shape
    if d == 0:
        for kernel in ("qkv", "qk", "av", "out"):
            _rec(ledger, "det_det", stage, kernel, 0)
        return det
    clip = _clip_default(det) if clip is None else clip
    qk = proj.part(det + det_pos, slice(0, 2 * c))
    v = proj.part(det, slice(2 * c, 3 * c))
    _rec(ledger, "det_det", stage, "qkv", 3 * c * c * b * d)
    q = split_heads(T.getitem(qk, (Ellipsis, slice(0, c))), proj.heads) * proj.scale
    k = split_heads(T.getitem(qk, (Ellipsis, slice(c, 2 * c))), proj.heads)
    out, _ = _softmax_attend(q, k, split_heads(v, proj.heads), None, clip)
    _rec(ledger, "det_det", stage, "qk", b * d * d * c)
    _rec(ledger, "det_det", stage, "av", b * d * d * c)
    _rec(ledger, "det_det", stage, "out", c * c * b * d)
    return proj.out(merge_heads(out))


# -- bound DET x [DET, PATCH] --------------------------------------------------------

def bound_det_attention(det: Tensor, det_pos, patch: Tensor, proj: RamProjections, spatial_pos=None,
                        policy: SpatialEncodingPolicy = SpatialEncodingPolicy(), patch_valid: np.ndarray | None = None,
                        ledger: FlopLedger | None = None, stage: int = 0, patch_qkv: Tensor | None = None,
                        clip: bool | None = None, return_weights: bool = False):
    """DET queries attend to DET and PATCH keys under one softmax.

    ``patch`` is (B, P, C) (or a (B, H, W, C) map, flattened here).
    ``spatial_pos`` broadcasts against it and is added to the patch key input
    (pre-addition) or to the projected keys (post-addition); values never carry
    it. ``patch_qkv`` lets a block reuse its already-projected patch values.
    With ``return_weights`` the (B, heads, D, D + P) softmax weights are
    returned as well.
    """
    if patch.ndim == 4:
        bb, hh, ww, cc = patch.shape
        patch = T.reshape(patch, (bb, hh * ww, cc))
        if spatial_pos is not None:
            sp_shape = spatial_pos.shape
            spatial_pos = T.reshape(T.as_tensor(spatial_pos), sp_shape[:-3] + (hh * ww, cc))
        if patch_qkv is not None:
            patch_qkv = T.reshape(patch_qkv, (bb, hh * ww, 3 * cc))
        if patch_valid is not None:
            patch_valid = patch_valid.reshape(bb, hh * ww)
    b, d, c = det.shape
    p = patch.shape[1]
    heads = proj.heads
    clip = _clip_default(det) if clip is None else clip
    if d == 0:
        for kind in ("det_det", "det_patch"):
            _rec(ledger, kind, stage, "qk", 0)
        out = det
        return (out, Tensor(np.zeros((b, heads, 0, p), dtype=det.dtype))) if return_weights else out

    qk_det = proj.part(det + det_pos, slice(0, 2 * c))
    v_det = proj.part(det, slice(2 * c, 3 * c))
    _rec(ledger, "det_det", stage, "qkv", 3 * c * c * b * d)

    use_pos = spatial_pos is not None and policy.mode != "none"
    if use_pos and policy.mode == "pre_addition":
        k_patch = proj.part(patch + spatial_pos, slice(c, 2 * c))
        _rec(ledger, "det_patch", stage, "key_proj", c * c * b * p)
    elif patch_qkv is not None:
        k_patch = T.getitem(patch_qkv, (Ellipsis, slice(c, 2 * c)))
    else:
        k_patch = proj.part(patch, slice(c, 2 * c))
        _rec(ledger, "det_patch", stage, "key_proj", c * c * b * p)
    if use_pos and policy.mode == "post_addition":
        k_patch = k_patch + spatial_pos
    if patch_qkv is not None:
        v_patch = T.getitem(patch_qkv, (Ellipsis, slice(2 * c, 3 * c)))
    else:
        v_patch = proj.part(patch, slice(2 * c, 3 * c))
        _rec(ledger, "det_patch", stage, "value_proj", c * c * b * p)

    q = split_heads(T.getitem(qk_det, (Ellipsis, slice(0, c))), heads) * proj.scale
    keys = split_heads(T.concat([T.getitem(qk_det, (Ellipsis, slice(c, 2 * c))), k_patch], axis=1), heads)
    values = split_heads(T.concat([v_det, v_patch], axis=1), heads)
    additive = None
    if patch_valid is not None and not patch_valid.all():
        mask = np.zeros((b, 1, 1, d + p), dtype=det.dtype)
        mask[:, 0, 0, d:] = np.where(patch_valid, 0.0, MASK_VALUE)
        additive = Tensor(mask)
    out, weights = _softmax_attend(q, keys, values, additive, clip)
    for kernel in ("qk", "av"):
        _rec(ledger, "det_det", stage, kernel, b * d * d * c)
        _rec(ledger, "det_patch", stage, kernel, b * d * p * c)
    _rec(ledger, "det_det", stage, "out", c * c * b * d)
    out = proj.out(merge_heads(out))
    return (out, weights) if return_weights else out


# -- joint global attention (reference mode) ----------------------------------------

def joint_global_attention(tokens: Tensor, proj: RamProjections, ledger: FlopLedger | None = None, stage: int = 0,
                           chunk: int = 2048, clip: bool | None = None) -> Tensor:
    """Plain global self-attention over all (B, N, C) tokens, queries chunked.

    Chunking only bounds memory; the arithmetic equals the unchunked kernel.
    """
    b, n, c = tokens.shape
    clip = _clip_default(tokens) if clip is None else clip
    qkv = proj.qkv(tokens)
    _rec(ledger, "joint_global", stage, "qkv", 3 * c * c * b * n)
    q = split_heads(T.getitem(qkv, (Ellipsis, slice(0, c))), proj.heads) * proj.scale
    k = split_heads(T.getitem(qkv, (Ellipsis, slice(c, 2 * c))), proj.heads)
    v = split_heads(T.getitem(qkv, (Ellipsis, slice(2 * c, 3 * c))), proj.heads)
    parts = []
    for start in range(0, n, chunk):
        qc = T.getitem(q, (Ellipsis, slice(start, min(start + chunk, n)), slice(None)))
        out, _ = _softmax_attend(qc, k, v, None, clip)
        parts.append(out)
    out = parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)
    _rec(ledger, "joint_global", stage, "qk", b * n * n * c)
    _rec(ledger, "joint_global", stage, "av", b * n * n * c)
    _rec(ledger, "joint_global", stage, "out", c * c * b * n)
    return proj.out(merge_heads(out))


# -- spatial encodings ---------------------------------------------------------------

class LearnedSpatialEncoding(Module):
    """A learnable base table bilinearly resized to each map's resolution."""

    def __init__(self, dim: int, rng: np.random.Generator, base: int = 16, dtype=None):
        self.table = Parameter(trunc_normal(rng, (1, base, base, dim)), dtype=dtype)

    def forward(self, h: int, w: int) -> Tensor:
        return T.reshape(T.upsample(self.table, (h, w)), (h, w, self.table.shape[-1]))


def spatial_encoding(h: int, w: int, dim: int, valid_sizes: list[tuple[int, int]] | None = None,
                     learned: LearnedSpatialEncoding | None = None, dtype=None):
    """Encoding for an h x w map: (h, w, C), or (B, h, w, C) for per-image valid regions."""
    if learned is not None:
        return learned(h, w)
    if not valid_sizes or all(v == (h, w) for v in valid_sizes):
        return Tensor(T.sine_encoding_2d(h, w, dim, dtype=dtype))
    tabs = {v: T.sine_encoding_2d(h, w, dim, valid=v, dtype=dtype) for v in set(valid_sizes)}
    return Tensor(np.stack([tabs[v] for v in valid_sizes]))
