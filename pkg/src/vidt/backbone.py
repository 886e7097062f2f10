"""Hierarchical Swin-style backbone whose blocks run reconfigured attention.

The backbone carries two token sets: multi-scale PATCH maps and a fixed
number of DET tokens. DET tokens keep their count at every stage; when the
channel width doubles they are duplicated along the embedding dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .ram import (
    FlopLedger,
    LearnedSpatialEncoding,
    RamProjections,
    SpatialEncodingPolicy,
    bound_det_attention,
    det_det_attention,
    patch_patch_attention,
    spatial_encoding,
)
from .tensor import Linear, LayerNorm, Module, Parameter, Tensor
from .tensor.nn import trunc_normal
from .windows import valid_mask, window_partition, window_reverse  # noqa: F401  (re-exported)

PATCH = 4
STRIDE = 32
NUM_STAGES = 4


@dataclass(frozen=True)
class StageConfig:
    channel_dim: int
    depth: int
    window_size: int
    num_heads: int
    cross_attention_enabled: bool = False
    det_self_attention_enabled: bool = True


PRESETS: dict[str, tuple[int, tuple[int, ...], tuple[int, ...]]] = {
    # name: (stage-1 channels, depths, heads)
    "swin-nano": (48, (2, 2, 6, 2), (3, 6, 12, 24)),
    # desk-scale preset for CPU tests; not one of the published configurations
    "swin-pico": (24, (2, 2, 2, 2), (3, 6, 12, 24)),
}


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageConfig, ...]
    num_det_tokens: int = 100
    spatial_encoding: SpatialEncodingPolicy = field(default_factory=SpatialEncodingPolicy)
    mlp_ratio: int = 4

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ConfigurationError(f"backbone needs {NUM_STAGES} stages, got {len(self.stages)}")
        for a, b in zip(self.stages[:-1], self.stages[1:]):
            if b.channel_dim != 2 * a.channel_dim:
                raise ConfigurationError("channel_dim must double at every stage")
        for s in self.stages:
            if s.depth < 1 or s.window_size < 1 or s.channel_dim % s.num_heads:
                raise ConfigurationError(f"invalid stage {s}")
        if self.num_det_tokens < 0:
            raise ConfigurationError("num_det_tokens must be non-negative")

    @property
    def embed_dim(self) -> int:
        return self.stages[0].channel_dim

    @property
    def det_dim(self) -> int:
        return self.stages[-1].channel_dim


def preset(name: str = "swin-nano", window_size: int = 7, num_det_tokens: int = 100,
           cross_attention_stages=(4,), det_self_attention_stages=(1, 2, 3, 4),
           spatial: SpatialEncodingPolicy | None = None) -> BackboneConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    for s in tuple(cross_attention_stages) + tuple(det_self_attention_stages):
        if s not in (1, 2, 3, 4):
            raise ConfigurationError(f"stage index {s} out of range 1..4")
    d1, depths, heads = PRESETS[name]
    stages = tuple(
        StageConfig(d1 * 2 ** i, depths[i], window_size, heads[i],
                    cross_attention_enabled=(i + 1) in cross_attention_stages,
                    det_self_attention_enabled=(i + 1) in det_self_attention_stages)
        for i in range(NUM_STAGES)
    )
    return BackboneConfig(stages, num_det_tokens, spatial or SpatialEncodingPolicy())


def _stage_list(value: str) -> tuple[int, ...]:
    value = value.strip().lower()
    if value in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in value.replace(" ", "").split(","))
    except ValueError as exc:
        raise ConfigurationError(f"bad stage list {value!r}") from exc


BACKBONE_KEYS = ("preset", "window_size", "num_det_tokens", "cross_attention_stages",
                 "det_self_attention_stages", "spatial_encoding", "spatial_kind")


def config_from_mapping(values: Mapping[str, str]) -> BackboneConfig:
    """Build a config from plain-text key/value pairs.

    Keys: ``preset``, ``window_size``, ``num_det_tokens``,
    ``cross_attention_stages`` and ``det_self_attention_stages`` (comma lists
    or ``none``), ``spatial_encoding`` (none/pre_addition/post_addition) and
    ``spatial_kind`` (sinusoidal/learnable). Unknown keys are errors.
    """
    unknown = sorted(set(values) - set(BACKBONE_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown backbone keys: {', '.join(unknown)}")
    try:
        return preset(
            values.get("preset", "swin-nano"),
            window_size=int(values.get("window_size", 7)),
            num_det_tokens=int(values.get("num_det_tokens", 100)),
            cross_attention_stages=_stage_list(values.get("cross_attention_stages", "4")),
            det_self_attention_stages=_stage_list(values.get("det_self_attention_stages", "1,2,3,4")),
            spatial=SpatialEncodingPolicy(values.get("spatial_encoding", "pre_addition"),
                                          values.get("spatial_kind", "sinusoidal")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc


def config_to_mapping(cfg: BackboneConfig, preset_name: str) -> dict[str, str]:
    fmt = lambda xs: ",".join(str(i + 1) for i in xs) or "none"  # noqa: E731
    return {
        "preset": preset_name,
        "window_size": str(cfg.stages[0].window_size),
        "num_det_tokens": str(cfg.num_det_tokens),
        "cross_attention_stages": fmt([i for i, s in enumerate(cfg.stages) if s.cross_attention_enabled]),
        "det_self_attention_stages": fmt([i for i, s in enumerate(cfg.stages) if s.det_self_attention_enabled]),
        "spatial_encoding": cfg.spatial_encoding.mode,
        "spatial_kind": cfg.spatial_encoding.kind,
    }


# -- token plumbing -----------------------------------------------------------------

class TokenState(NamedTuple):
    patch_maps: list[Tensor]          # per stage (B, h_l, w_l, d_l)
    det_tokens: Tensor                # (B, D, d_L)
    det_positional: Tensor            # (D, d_1) learnable encoding
    valid_sizes: list[list[tuple[int, int]]]  # per stage, per image unpadded (h, w)


def pad_images(images: list[np.ndarray], multiple: int = STRIDE) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Stack HxWx3 images into one zero-padded batch (bottom/right) sized to ``multiple``."""
    hs = [im.shape[0] for im in images]
    ws = [im.shape[1] for im in images]
    hp = -(-max(hs) // multiple) * multiple
    wp = -(-max(ws) // multiple) * multiple
    batch = np.zeros((len(images), hp, wp, images[0].shape[2]), dtype=np.result_type(*images))
    for i, im in enumerate(images):
        batch[i, :im.shape[0], :im.shape[1]] = im
    return batch, list(zip(hs, ws))


def patch_embed(image: Tensor, proj: Linear) -> Tensor:
    """(B, H, W, 3) -> (B, H/4, W/4, d1) via non-overlapping 4x4 patches.

    The image is zero-padded on the bottom/right to a multiple of 32 first.
    """
    b, h, w, c = image.shape
    hp, wp = -(-h // STRIDE) * STRIDE, -(-w // STRIDE) * STRIDE
    image = T.pad(image, [(0, 0), (0, hp - h), (0, wp - w), (0, 0)])
    x = T.reshape(image, (b, hp // PATCH, PATCH, wp // PATCH, PATCH, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, hp // PATCH, wp // PATCH, PATCH * PATCH * c))
    return proj(x)


class PatchMerge(Module):
    """2x2 neighbourhood concat (4d) -> LayerNorm -> linear to 2d."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=None):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, init="trunc_normal", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        x = T.pad(x, [(0, 0), (0, h % 2), (0, w % 2), (0, 0)])
        parts = [T.getitem(x, (slice(None), slice(i, None, 2), slice(j, None, 2)))
                 for i, j in ((0, 0), (1, 0), (0, 1), (1, 1))]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))


def patch_merge(x: Tensor, merge: PatchMerge) -> Tensor:
    return merge(x)


def det_dim_duplicate(det: Tensor) -> Tensor:
    """[a1..ad] -> [a1..ad, a1..ad] per DET row; no parameters involved."""
    return T.repeat_last(det, 2)


# -- blocks and stages --------------------------------------------------------------

class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=None):
        self.fc1 = Linear(dim, hidden, rng, init="trunc_normal", dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, init="trunc_normal", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class RamBlock(Module):
    """norm -> reconfigured attention -> residual, norm -> MLP -> residual.

    The norms, projections and MLP are shared by PATCH and DET tokens.
    """

    def __init__(self, stage: StageConfig, shifted: bool, rng: np.random.Generator, mlp_ratio: int = 4, dtype=None):
        dim = stage.channel_dim
        self.cfg = stage
        self.shifted = shifted
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = RamProjections(dim, stage.num_heads, rng, dtype=dtype)
        k = stage.window_size
        self.rel_bias = Parameter(np.zeros(((2 * k - 1) ** 2, stage.num_heads)), dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = FeedForward(dim, mlp_ratio * dim, rng, dtype=dtype)

    def forward(self, x: Tensor, det: Tensor, det_pos: Tensor, valid: np.ndarray, cross: bool, det_self: bool,
                spatial_pos=None, policy: SpatialEncodingPolicy = SpatialEncodingPolicy(),
                ledger: FlopLedger | None = None, stage: int = 0, record: dict | None = None):
        b, h, w, c = x.shape
        xn = self.norm1(x)
        dn = self.norm1(det)
        qkv = self.attn.qkv(xn)
        if ledger is not None:
            ledger.record("patch_patch", stage, "qkv", 3 * c * c * b * h * w)
        x_att = patch_patch_attention(xn, self.attn, self.rel_bias, self.cfg.window_size, self.shifted,
                                      valid=valid, ledger=ledger, stage=stage, qkv=qkv)
        if cross:
            det_att, weights = bound_det_attention(dn, det_pos, xn, self.attn, spatial_pos, policy,
                                                   patch_valid=valid, ledger=ledger, stage=stage,
                                                   patch_qkv=qkv, return_weights=True)
            if record is not None:
                record[stage] = weights.data
        elif det_self:
            det_att = det_det_attention(dn, det_pos, self.attn, ledger=ledger, stage=stage)
        else:
            det_att = None
        x = x + x_att
        det = det + det_att if det_att is not None else det
        x = x + self.mlp(self.norm2(x))
        det = det + self.mlp(self.norm2(det))
        return x, det


class Stage(Module):
    def __init__(self, cfg: StageConfig, index: int, rng: np.random.Generator, mlp_ratio: int, learned_pos: bool,
                 merge: bool, dtype=None):
        self.cfg = cfg
        self.index = index
        self.blocks = [RamBlock(cfg, shifted=bool(i % 2), rng=rng, mlp_ratio=mlp_ratio, dtype=dtype)
                       for i in range(cfg.depth)]
        self.spatial = LearnedSpatialEncoding(cfg.channel_dim, rng, dtype=dtype) if learned_pos else None
        self.merge = PatchMerge(cfg.channel_dim, rng, dtype=dtype) if merge else None


class Backbone(Module):
    """Patch embedding, four RAM stages, DET tokens and their encoding."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=None):
        self.cfg = cfg
        d1 = cfg.embed_dim
        self.patch_proj = Linear(PATCH * PATCH * 3, d1, rng, init="trunc_normal", dtype=dtype)
        learned = cfg.spatial_encoding.kind == "learnable"
        self.stages = [
            Stage(s, i + 1, rng, cfg.mlp_ratio, learned and s.cross_attention_enabled, merge=i < NUM_STAGES - 1,
                  dtype=dtype)
            for i, s in enumerate(cfg.stages)
        ]
        self.det_tokens = Parameter(trunc_normal(rng, (cfg.num_det_tokens, d1)), dtype=dtype)
        self.det_pos = Parameter(trunc_normal(rng, (cfg.num_det_tokens, d1)), dtype=dtype)
        self.det_norm = LayerNorm(cfg.det_dim, dtype=dtype)

    def forward(self, images: Tensor, image_sizes: list[tuple[int, int]] | None = None,
                ledger: FlopLedger | None = None, record_attention: dict | None = None) -> TokenState:
        return forward_backbone(self, images, image_sizes, ledger, record_attention)


def forward_backbone(model: Backbone, images: Tensor, image_sizes: list[tuple[int, int]] | None = None,
                     ledger: FlopLedger | None = None, record_attention: dict | None = None) -> TokenState:
    """Run all four stages on a (B, H, W, 3) batch.

    ``image_sizes`` gives each image's unpadded (H, W); padded cells are
    masked out of attention and zeroed after every block. ``record_attention`` (a dict)
    receives the last block's bound-attention weights per cross-attention stage.
    """
    cfg = model.cfg
    b, h, w, _ = images.shape
    sizes = image_sizes or [(h, w)] * b
    x = patch_embed(images, model.patch_proj)
    valid_sizes = [[(-(-vh // PATCH), -(-vw // PATCH)) for vh, vw in sizes]]
    d_count = cfg.num_det_tokens
    det = T.reshape(model.det_tokens, (1, d_count, cfg.embed_dim)) * Tensor(np.ones((b, 1, 1), dtype=x.dtype))
    det_pos = model.det_pos
    maps = []
    for si, stage in enumerate(model.stages):
        if si > 0:
            det = det_dim_duplicate(det)
            det_pos = det_dim_duplicate(det_pos)
        if det.shape[1] != d_count:
            raise DimensionError(f"DET count changed at stage {si + 1}: {det.shape[1]} != {d_count}")
        _, hh, ww, c = x.shape
        if c != stage.cfg.channel_dim:
            raise DimensionError(f"stage {si + 1} expects {stage.cfg.channel_dim} channels, got {c}")
        vs = valid_sizes[-1]
        valid = valid_mask(vs, hh, ww)
        spatial_pos = None
        if stage.cfg.cross_attention_enabled and cfg.spatial_encoding.mode != "none":
            spatial_pos = spatial_encoding(hh, ww, c, vs, stage.spatial, dtype=x.dtype)
        # padded cells are held at zero so they neither leak into valid cells nor pass gradients
        keep = None if valid.all() else Tensor(valid[..., None].astype(x.dtype))
        if keep is not None:
            x = x * keep
        for block in stage.blocks:
            x, det = block(x, det, det_pos, valid, stage.cfg.cross_attention_enabled,
                           stage.cfg.det_self_attention_enabled, spatial_pos, cfg.spatial_encoding,
                           ledger, si + 1, record_attention)
            if keep is not None:
                x = x * keep
        maps.append(x)
        if stage.merge is not None:
            x = stage.merge(x)
            valid_sizes.append([(-(-vh // 2), -(-vw // 2)) for vh, vw in vs])
    det = model.det_norm(det)
    return TokenState(maps, det, model.det_pos, valid_sizes)
