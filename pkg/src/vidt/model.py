"""The full detector: backbone, optional pyramid fusion, neck and heads."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, TokenState, preset
from .epff import PyramidFusion
from .errors import ConfigurationError
from .losses import LossConfig
from .neck import DetectionHead, InputProjection, Neck, NeckConfig, class_prior_bias, decode, drop_layers as _drop
from .ram import FlopLedger
from .tensor import MLP, Linear, Module, Parameter, Tensor
from .uqr import DEFAULT_COEFFS, DEFAULT_RESOLUTION, MaskHead

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=lambda: preset("swin-nano"))
    preset_name: str = "swin-nano"
    num_classes: int = 2
    neck: NeckConfig | None = field(default_factory=NeckConfig)
    epff: bool = False
    uqr: bool = False
    mask_resolution: int = DEFAULT_RESOLUTION
    mask_coeffs: int = DEFAULT_COEFFS
    iou_aware: bool = False
    token_label: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if self.mask_coeffs > self.mask_resolution ** 2:
            raise ConfigurationError(
                f"mask_coeffs {self.mask_coeffs} exceeds {self.mask_resolution}x{self.mask_resolution}")
        if self.neck is None and (self.epff or self.token_label):
            raise ConfigurationError("pyramid fusion and token labeling need the neck")

    @property
    def num_logits(self) -> int:
        return self.num_classes + (1 if self.loss.mode == "ce" else 0)


def normalize_images(images: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 (B, H, W, 3) -> standardized float."""
    dtype = dtype or T.get_default_dtype()
    x = images.astype(np.float64) / 255.0
    return ((x - IMAGE_MEAN) / IMAGE_STD).astype(dtype)


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0, dtype=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        # dropout draws from its own stream so that weight init and dropout stay independent
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.backbone = Backbone(cfg.backbone, rng, dtype=dtype)
        dims = [s.channel_dim for s in cfg.backbone.stages]
        focal = cfg.loss.mode == "focal"
        if cfg.neck is not None:
            width = cfg.neck.width
            self.input_proj = InputProjection(dims, width, rng, dtype=dtype)
            self.epff = PyramidFusion(len(dims), width, rng, dtype=dtype) if cfg.epff else None
            self.neck = Neck(cfg.neck, cfg.backbone.det_dim, cfg.backbone.embed_dim, len(dims), cfg.num_logits, rng,
                             self.dropout_rng, focal=focal, dtype=dtype)
            self.head = None
        else:
            width = cfg.backbone.det_dim
            self.input_proj = self.epff = self.neck = None
            self.head = DetectionHead(width, cfg.num_logits, rng, focal=focal, dtype=dtype)
        self.width = width
        self.mask_head = MaskHead(width, cfg.mask_coeffs, rng, dtype=dtype) if cfg.uqr else None
        self.iou_head = MLP([width, width, 1], rng, dtype=dtype) if cfg.iou_aware else None
        if cfg.token_label:
            self.token_cls = Linear(width, cfg.num_classes, rng, dtype=dtype)
            self.token_cls.bias = Parameter(class_prior_bias(cfg.num_classes), dtype=dtype)
        else:
            self.token_cls = None

    def forward(self, images: Tensor, image_sizes: list[tuple[int, int]] | None = None,
                ledger: FlopLedger | None = None, record_attention: dict | None = None) -> dict:
        state: TokenState = self.backbone(images, image_sizes, ledger, record_attention)
        out: dict = {"state": state, "token_logits": None}
        if self.neck is None:
            det = state.det_tokens
            logits = self.head.cls(det)
            boxes = T.sigmoid(self.head.box(det))
            layers = [{"hidden": det, "logits": logits, "boxes": boxes}]
        else:
            maps = self.input_proj(state.patch_maps)
            if self.epff is not None:
                maps = self.epff(maps)
            layers = decode(self.neck, state.det_tokens, state.det_positional, maps, state.valid_sizes)
            if self.token_cls is not None:
                out["token_logits"] = [self.token_cls(m) for m in maps]
        final = layers[-1]
        if self.mask_head is not None:
            final["masks"] = self.mask_head(final["hidden"])
        if self.iou_head is not None:
            if self.cfg.loss.aware_all_layers:
                for layer in layers:
                    layer["iou_logits"] = self.iou_head(layer["hidden"])
            else:
                final["iou_logits"] = self.iou_head(final["hidden"])
        out["layers"] = layers
        return out


def drop_layers(model: Detector, n_drop: int) -> Detector:
    """A detector sharing weights with ``model`` whose neck lost its top ``n_drop`` layers."""
    if model.neck is None:
        raise ConfigurationError("layer drop needs the neck")
    out = copy.copy(model)
    out.neck = _drop(model.neck, n_drop)
    return out


def postprocess(layer: dict, image_sizes: list[tuple[int, int]], focal: bool = True, top_k: int = 100,
                iou_logits: Tensor | None = None) -> list[dict]:
    """Per-image detections: scores, labels, pixel xyxy boxes and the slot they came from."""
    logits = layer["logits"].data.astype(np.float64)
    boxes = layer["boxes"].data.astype(np.float64)
    results = []
    for i, (h, w) in enumerate(image_sizes):
        if focal:
            prob = 1.0 / (1.0 + np.exp(-logits[i]))
        else:
            z = np.exp(logits[i] - logits[i].max(-1, keepdims=True))
            prob = (z / z.sum(-1, keepdims=True))[:, :-1]
        d, c = prob.shape
        flat = prob.reshape(-1)
        k = min(top_k, flat.size)
        idx = np.argsort(-flat, kind="stable")[:k]
        slots, labels = idx // c, idx % c
        cx, cy, bw, bh = boxes[i, slots].T
        xyxy = np.stack([(cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h], -1)
        results.append({"scores": flat[idx], "labels": labels, "boxes": xyxy, "slots": slots})
    return results
