"""Encoder-free neck: deformable decoding layers with per-layer heads.

Each layer runs DET self-attention, multi-scale deformable cross-attention
into the projected PATCH maps, and an FFN, each followed by residual add and
LayerNorm. Every layer owns a class head and a box head so that auxiliary
losses, iterative box refinement and inference-time layer drop all work.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .ram import merge_heads, split_heads
from .tensor import MLP, Dropout, GroupNorm, LayerNorm, Linear, Module, Parameter, Tensor

BOX_EPS = 1e-5


@dataclass(frozen=True)
class NeckConfig:
    num_layers: int = 6
    width: int = 256
    heads: int = 8
    points: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.1
    aux_loss: bool = True
    box_refine: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("neck needs at least one layer")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by {self.heads} heads")
        if self.width % 32:
            raise ConfigurationError("width must be a multiple of 32 for group norm")


def inverse_sigmoid(x: Tensor, eps: float = BOX_EPS) -> Tensor:
    x = T.clip(x, 0.0, 1.0)
    return T.log(T.clip(x, eps, None)) - T.log(T.clip(1.0 - x, eps, None))


def refine_boxes(prev_box: Tensor, delta: Tensor) -> Tensor:
    """sigmoid(inverse_sigmoid(prev) + delta), padding 2-d references with zeros."""
    if prev_box.shape[-1] == 2:
        delta_xy = T.getitem(delta, (Ellipsis, slice(0, 2)))
        delta_wh = T.getitem(delta, (Ellipsis, slice(2, 4)))
        return T.sigmoid(T.concat([delta_xy + inverse_sigmoid(prev_box), delta_wh], axis=-1))
    return T.sigmoid(delta + inverse_sigmoid(prev_box))


# -- multi-scale deformable attention -------------------------------------------------

def ring_offsets(heads: int, levels: int, points: int) -> np.ndarray:
    """Initial offsets: one direction per head, radius growing with the point index."""
    theta = np.arange(heads) * (2.0 * math.pi / heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    grid *= np.arange(1, points + 1)[None, None, :, None]
    return grid.reshape(-1)


class MSDeformAttn(Module):
    def __init__(self, width: int, levels: int, heads: int, points: int, rng: np.random.Generator, dtype=None):
        self.width, self.levels, self.heads, self.points = width, levels, heads, points
        n_off = heads * levels * points
        self.sampling_offsets = Linear(width, 2 * n_off, rng, init="zeros", dtype=dtype)
        self.sampling_offsets.bias = Parameter(ring_offsets(heads, levels, points), dtype=dtype)
        self.attention_weights = Linear(width, n_off, rng, init="zeros", dtype=dtype)
        self.value_proj = Linear(width, width, rng, dtype=dtype)
        self.output_proj = Linear(width, width, rng, dtype=dtype)


def sampling_pixels(refs: Tensor, offsets: Tensor, shapes: list[tuple[int, int]], valid_ratios: np.ndarray) -> Tensor:
    """Pixel coordinates (B, D, M, L, K, 2) of every sampling point.

    ``refs`` are normalized (B, D, 2) centres or (B, D, 4) boxes. Offsets are
    in level pixels for 2-d references; for 4-d references they are in units
    of half the box size, divided by K. ``valid_ratios`` (B, L, 2) maps the
    batch-normalized reference onto each image's unpadded region.
    """
    b, d = refs.shape[:2]
    k = offsets.shape[-2]
    size = np.array([[w, h] for h, w in shapes], dtype=refs.dtype)  # L, 2 as (x, y)
    vr = Tensor(valid_ratios.astype(refs.dtype)[:, None, None, :, None, :])  # B,1,1,L,1,2
    size_t = Tensor(size[None, None, None, :, None, :])
    if refs.shape[-1] == 2:
        ref = T.reshape(refs, (b, d, 1, 1, 1, 2))
        return ref * vr * size_t - 0.5 + offsets
    xy = T.reshape(T.getitem(refs, (Ellipsis, slice(0, 2))), (b, d, 1, 1, 1, 2))
    wh = T.reshape(T.getitem(refs, (Ellipsis, slice(2, 4))), (b, d, 1, 1, 1, 2))
    loc = (xy + offsets * (0.5 / k) * wh) * vr
    return loc * size_t - 0.5


def deformable_aggregate(value_maps: list[Tensor], pixels: Tensor, weights: Tensor) -> Tensor:
    """Sum over levels and points of weight * bilinear sample.

    ``value_maps[l]`` is (B*M, H_l, W_l, C/M); ``pixels`` is (B, D, M, L, K, 2);
    ``weights`` is (B, D, M, L, K). Returns (B, D, M*C/M).
    """
    b, d, m, n_levels, k, _ = pixels.shape
    acc = None
    for lvl, vmap in enumerate(value_maps):
        pts = T.getitem(pixels, (slice(None), slice(None), slice(None), lvl))  # B,D,M,K,2
        pts = T.reshape(T.transpose(pts, (0, 2, 1, 3, 4)), (b * m, d * k, 2))
        sampled = T.bilinear_sample(vmap, pts)  # B*M, D*K, hd
        hd = sampled.shape[-1]
        sampled = T.reshape(sampled, (b, m, d, k, hd))
        w = T.getitem(weights, (slice(None), slice(None), slice(None), lvl))  # B,D,M,K
        w = T.reshape(T.transpose(w, (0, 2, 1, 3)), (b, m, d, k, 1))
        term = T.sum(sampled * w, axis=3)  # B,M,D,hd
        acc = term if acc is None else acc + term
    return merge_heads(acc)


def ms_deform_attn(module: MSDeformAttn, query: Tensor, refs: Tensor, value_maps: list[Tensor],
                   valid_ratios: np.ndarray, offsets: Tensor | None = None, weights: Tensor | None = None) -> Tensor:
    """Deformable cross-attention of (B, D, C) queries into L value maps (B, H_l, W_l, C).

    ``offsets`` (B, D, M, L, K, 2) and ``weights`` (B, D, M, L, K, already
    normalized) override the predicted ones when given.
    """
    b, d, c = query.shape
    m, n_lv, k = module.heads, module.levels, module.points
    if len(value_maps) != n_lv:
        raise ConfigurationError(f"expected {n_lv} levels, got {len(value_maps)}")
    if offsets is None:
        offsets = T.reshape(module.sampling_offsets(query), (b, d, m, n_lv, k, 2))
    if weights is None:
        logits = T.reshape(module.attention_weights(query), (b, d, m, n_lv * k))
        weights = T.reshape(T.softmax(logits, axis=-1), (b, d, m, n_lv, k))
    shapes = [vm.shape[1:3] for vm in value_maps]
    heads_maps = []
    for vm in value_maps:
        vb, h, w, _ = vm.shape
        v = module.value_proj(vm)
        v = T.transpose(T.reshape(v, (vb, h, w, m, c // m)), (0, 3, 1, 2, 4))
        heads_maps.append(T.reshape(v, (vb * m, h, w, c // m)))
    pixels = sampling_pixels(refs, offsets, shapes, valid_ratios)
    return module.output_proj(deformable_aggregate(heads_maps, pixels, weights))


# -- decoder layer ----------------------------------------------------------------------

class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=None):
        self.heads = heads
        self.in_proj = Linear(width, 3 * width, rng, dtype=dtype)
        self.out_proj = Linear(width, width, rng, dtype=dtype)

    def forward(self, tgt: Tensor, pos: Tensor) -> Tensor:
        c = tgt.shape[-1]
        w, bias = self.in_proj.weight, self.in_proj.bias
        qk = T.linear(tgt + pos, T.getitem(w, (slice(None), slice(0, 2 * c))), T.getitem(bias, slice(0, 2 * c)))
        v = T.linear(tgt, T.getitem(w, (slice(None), slice(2 * c, 3 * c))), T.getitem(bias, slice(2 * c, 3 * c)))
        scale = 1.0 / math.sqrt(c // self.heads)
        q = split_heads(T.getitem(qk, (Ellipsis, slice(0, c))), self.heads) * scale
        k = split_heads(T.getitem(qk, (Ellipsis, slice(c, 2 * c))), self.heads)
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)), axis=-1)
        return self.out_proj(merge_heads(T.matmul(att, split_heads(v, self.heads))))


class DecoderLayer(Module):
    def __init__(self, cfg: NeckConfig, levels: int, rng: np.random.Generator, drop_rng, dtype=None):
        w = cfg.width
        self.self_attn = SelfAttention(w, cfg.heads, rng, dtype=dtype)
        self.norm1 = LayerNorm(w, dtype=dtype)
        self.cross_attn = MSDeformAttn(w, levels, cfg.heads, cfg.points, rng, dtype=dtype)
        self.norm2 = LayerNorm(w, dtype=dtype)
        self.ffn1 = Linear(w, cfg.ffn_dim, rng, dtype=dtype)
        self.ffn2 = Linear(cfg.ffn_dim, w, rng, dtype=dtype)
        self.norm3 = LayerNorm(w, dtype=dtype)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def forward(self, tgt: Tensor, pos: Tensor, refs: Tensor, value_maps: list[Tensor], valid_ratios) -> Tensor:
        tgt = self.norm1(tgt + self.drop(self.self_attn(tgt, pos)))
        tgt = self.norm2(tgt + self.drop(ms_deform_attn(self.cross_attn, tgt + pos, refs, value_maps, valid_ratios)))
        hidden = self.drop(T.relu(self.ffn1(tgt)))
        return self.norm3(tgt + self.drop(self.ffn2(hidden)))


# -- heads ------------------------------------------------------------------------------

def class_prior_bias(n: int, prior: float = 0.01) -> np.ndarray:
    return np.full(n, -math.log((1 - prior) / prior))


class DetectionHead(Module):
    """Linear class head plus 3-layer box FFN (last layer zero-initialized)."""

    def __init__(self, width: int, num_logits: int, rng: np.random.Generator, focal: bool = True, dtype=None):
        self.cls = Linear(width, num_logits, rng, dtype=dtype)
        if focal:
            self.cls.bias = Parameter(class_prior_bias(num_logits), dtype=dtype)
        self.box = MLP([width, width, width, 4], rng, dtype=dtype)
        last = self.box.layers[-1]
        last.weight = Parameter(np.zeros(last.weight.shape), dtype=dtype)


class InputProjection(Module):
    """Per-level Linear(d_l -> width) followed by GroupNorm(32)."""

    def __init__(self, dims: list[int], width: int, rng: np.random.Generator, dtype=None):
        self.proj = [Linear(d, width, rng, dtype=dtype) for d in dims]
        self.norm = [GroupNorm(32, width, dtype=dtype) for _ in dims]

    def forward(self, maps: list[Tensor]) -> list[Tensor]:
        return [n(p(x)) for p, n, x in zip(self.proj, self.norm, maps)]


# -- neck ------------------------------------------------------------------------------

def valid_ratios_for(valid_sizes: list[list[tuple[int, int]]], shapes: list[tuple[int, int]]) -> np.ndarray:
    """(B, L, 2) fractions (x, y) of each level's map that hold real pixels."""
    out = np.zeros((len(valid_sizes[0]), len(shapes), 2))
    for lvl, ((h, w), sizes) in enumerate(zip(shapes, valid_sizes)):
        for i, (vh, vw) in enumerate(sizes):
            out[i, lvl] = (min(vw, w) / w, min(vh, h) / h)
    return out


class Neck(Module):
    def __init__(self, cfg: NeckConfig, det_in_dim: int, det_pos_dim: int, levels: int, num_logits: int,
                 rng: np.random.Generator, drop_rng=None, focal: bool = True, dtype=None):
        self.cfg = cfg
        w = cfg.width
        self.det_proj = Linear(det_in_dim, w, rng, dtype=dtype)
        self.query_pos = Linear(det_pos_dim, w, rng, dtype=dtype)
        self.ref_point = Linear(w, 2, rng, dtype=dtype)
        self.layers = [DecoderLayer(cfg, levels, rng, drop_rng, dtype=dtype) for _ in range(cfg.num_layers)]
        self.heads = [DetectionHead(w, num_logits, rng, focal, dtype=dtype) for _ in range(cfg.num_layers)]

    def initial_references(self, pos: Tensor) -> Tensor:
        return T.sigmoid(self.ref_point(pos))

    def forward(self, det_tokens: Tensor, det_pos: Tensor, value_maps: list[Tensor],
                valid_sizes: list[list[tuple[int, int]]]):
        return decode(self, det_tokens, det_pos, value_maps, valid_sizes)


def decode(neck: Neck, det_tokens: Tensor, det_pos: Tensor, value_maps: list[Tensor],
           valid_sizes: list[list[tuple[int, int]]]) -> list[dict]:
    """Run every layer; return one dict per layer with hidden, logits, boxes, refs.

    Layer j's outputs depend only on layers 1..j, so truncating the stack
    leaves the surviving outputs bit-identical.
    """
    b = det_tokens.shape[0]
    tgt = neck.det_proj(det_tokens)
    pos = neck.query_pos(det_pos)  # D, width
    pos = T.reshape(pos, (1,) + pos.shape)
    refs = neck.initial_references(pos) * Tensor(np.ones((b, 1, 1), dtype=tgt.dtype))
    shapes = [vm.shape[1:3] for vm in value_maps]
    ratios = valid_ratios_for(valid_sizes, shapes)
    outputs = []
    for layer, head in zip(neck.layers, neck.heads):
        tgt = layer(tgt, pos, refs, value_maps, ratios)
        boxes = refine_boxes(refs, head.box(tgt))
        outputs.append({"hidden": tgt, "logits": head.cls(tgt), "boxes": boxes, "refs": refs})
        if neck.cfg.box_refine:
            refs = boxes.detach()
    return outputs


def drop_layers(neck: Neck, n_drop: int) -> Neck:
    """A neck sharing weights with ``neck`` minus its top ``n_drop`` layers and heads."""
    total = len(neck.layers)
    if not 0 <= n_drop <= 5 or n_drop >= total:
        raise ConfigurationError(f"n_drop must be in 0..{min(5, total - 1)}, got {n_drop}")
    out = copy.copy(neck)
    out.layers = neck.layers[:total - n_drop]
    out.heads = neck.heads[:total - n_drop]
    return out
