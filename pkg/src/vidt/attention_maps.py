"""Cross-attention heatmaps: where each DET token looks on the PATCH grid."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import AttentionUnavailableError
from .model import Detector, normalize_images


@dataclass
class Heatmap:
    stage: int
    token: int
    raw: np.ndarray      # head-averaged PATCH-side weights over the valid grid
    mass: float          # head-averaged PATCH-side softmax mass (sum of ``raw``)

    @property
    def normalized(self) -> np.ndarray:
        peak = self.raw.max()
        return self.raw / peak if peak > 0 else np.zeros_like(self.raw)


def cross_attention_stages(model: Detector) -> list[int]:
    return [i + 1 for i, s in enumerate(model.cfg.backbone.stages) if s.cross_attention_enabled]


def export_attention(model: Detector, image: np.ndarray, stages: Sequence[int] | None = None,
                     tokens: Sequence[int] = (0,)) -> list[Heatmap]:
    """Run one uint8 (H, W, 3) image and return heatmaps for the requested stages and DET tokens.

    The weights come from the last block of each stage.
    """
    enabled = cross_attention_stages(model)
    stages = list(enabled if stages is None else stages)
    for s in stages:
        if s not in enabled:
            raise AttentionUnavailableError(f"stage {s} has no cross-attention (enabled: {enabled or 'none'})")
    h, w = image.shape[:2]
    record: dict = {}
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            x = T.Tensor(normalize_images(image[None], model.backbone.patch_proj.weight.dtype))
            state = model.backbone(x, [(h, w)], record_attention=record)
    finally:
        model.train(was_training)
    d = model.cfg.backbone.num_det_tokens
    out = []
    for s in stages:
        weights = record[s][0]                      # heads, D, D + P
        gh, gw = state.patch_maps[s - 1].shape[1:3]
        vh, vw = state.valid_sizes[s - 1][0]
        patch = weights[:, :, d:].mean(axis=0).reshape(d, gh, gw)
        for t in tokens:
            raw = patch[t, :vh, :vw].astype(np.float64)
            out.append(Heatmap(s, int(t), raw, float(patch[t].sum())))
    return out


def save_heatmaps(maps: Sequence[Heatmap], out_dir: str | Path, image_hw: tuple[int, int] | None = None) -> list[Path]:
    """Write one 8-bit grayscale PNG per heatmap, optionally upsampled to the image size."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for hm in maps:
        img = Image.fromarray(np.round(hm.normalized * 255).astype(np.uint8), mode="L")
        if image_hw is not None:
            img = img.resize((image_hw[1], image_hw[0]), Image.NEAREST)
        path = out_dir / f"stage{hm.stage}_token{hm.token:03d}.png"
        img.save(path)
        paths.append(path)
    return paths
