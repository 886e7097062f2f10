"""Top-down pyramid fusion with residual bottleneck units.

Starting from the coarsest level, each level's fused map is

    fused[l] = smooth[l](upsample(fused[l + 1]) + transform[l](x[l]))

and the coarsest level is ``transform[L](x[L])``. Upsampling is bilinear.
The last conv of every residual branch starts at zero, so a fresh module is
an FPN-style upsample-and-add.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Conv2d, GroupNorm, Module, Tensor


class ResUnit(Module):
    """x + conv1x1(relu(gn(conv3x3(relu(gn(conv1x1(x))))))) with a 4x bottleneck."""

    def __init__(self, width: int, rng: np.random.Generator, reduction: int = 4, groups: int = 32, dtype=None):
        mid = width // reduction
        self.reduce = Conv2d(width, mid, 1, rng, bias=False, dtype=dtype)
        self.norm1 = GroupNorm(min(groups, mid), mid, dtype=dtype)
        self.conv = Conv2d(mid, mid, 3, rng, bias=False, dtype=dtype)
        self.norm2 = GroupNorm(min(groups, mid), mid, dtype=dtype)
        self.expand = Conv2d(mid, width, 1, rng, zero_init=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.norm1(self.reduce(x)))
        h = T.relu(self.norm2(self.conv(h)))
        return x + self.expand(h)


class PyramidFusion(Module):
    def __init__(self, levels: int, width: int, rng: np.random.Generator, dtype=None):
        self.transform = [ResUnit(width, rng, dtype=dtype) for _ in range(levels)]
        # the coarsest level has no smoothing unit
        self.smooth = [ResUnit(width, rng, dtype=dtype) for _ in range(levels - 1)]

    def forward(self, maps: list[Tensor]) -> list[Tensor]:
        return fuse(self, maps)


def fuse(module: PyramidFusion, maps: list[Tensor]) -> list[Tensor]:
    """Fuse fine-to-coarse (B, h_l, w_l, C) maps; output sizes match the inputs."""
    n = len(maps)
    fused: list[Tensor | None] = [None] * n
    fused[-1] = module.transform[-1](maps[-1])
    for lvl in range(n - 2, -1, -1):
        h, w = maps[lvl].shape[1:3]
        up = T.upsample(fused[lvl + 1], (h, w), mode="bilinear")
        fused[lvl] = module.smooth[lvl](up + module.transform[lvl](maps[lvl]))
    return fused


def flatten_levels(maps: list[Tensor]) -> Tensor:
    """Concatenate (B, h_l, w_l, C) maps into one (B, sum h_l w_l, C) sequence."""
    b, c = maps[0].shape[0], maps[0].shape[-1]
    return T.concat([T.reshape(m, (b, -1, c)) for m in maps], axis=1)
