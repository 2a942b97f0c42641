"""Feature pyramid over the SAC-processed taps.

Laterals are 1x1 convolutions to a common width F. The coarsest level is
smoothed directly; each finer level adds the 2x nearest upsample of the level
above before its own 3x3 smoothing. All four levels are then average-pooled
to the head grid, concatenated (P2..P5, 4F channels) and projected by a 1x1
convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Conv
from .tensor import ConvSpec, ShapeError, Tensor, add, avgpool_to, concat_channels, upsample_nearest2


@dataclass
class FPNParams:
    laterals: list  # fine-to-coarse, one Conv per level
    smooths: list
    fuse: Conv
    width: int

    @classmethod
    def init(cls, tap_channels, width: int, out_channels: int, rng: np.random.Generator,
             dtype=np.float32) -> "FPNParams":
        if len(tap_channels) != 4:
            raise ShapeError(f"pyramid needs exactly 4 taps, got {len(tap_channels)}")
        laterals = [Conv.init(ConvSpec.same(1, c, width), rng, dtype) for c in tap_channels]
        smooths = [Conv.init(ConvSpec.same(3, width, width), rng, dtype) for _ in tap_channels]
        fuse = Conv.init(ConvSpec.same(1, 4 * width, out_channels), rng, dtype)
        return cls(laterals, smooths, fuse, width)

    def named(self, prefix: str) -> dict:
        out = {}
        for i, (lat, sm) in enumerate(zip(self.laterals, self.smooths)):
            out.update(lat.named(f"{prefix}.lateral{i}"))
            out.update(sm.named(f"{prefix}.smooth{i}"))
        out.update(self.fuse.named(f"{prefix}.fuse"))
        return out


def build_pyramid(taps, params: FPNParams) -> list:
    """[P2, P3, P4, P5] from taps ordered fine to coarse."""
    if len(taps) != 4:
        raise ShapeError(f"pyramid needs exactly 4 taps, got {len(taps)}")
    for fine, coarse in zip(taps, taps[1:]):
        if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
            raise ShapeError(f"tap extents must halve: {fine.shape} -> {coarse.shape}")
    levels = [None] * 4
    levels[3] = params.smooths[3](params.laterals[3](taps[3]))
    for i in (2, 1, 0):
        merged = add(params.laterals[i](taps[i]), upsample_nearest2(levels[i + 1]))
        levels[i] = params.smooths[i](merged)
    return levels


def fuse_pyramid(levels, params: FPNParams, grid: int) -> Tensor:
    pooled = [avgpool_to(p, (grid, grid)) for p in levels]
    return params.fuse(concat_channels(pooled))
