"""Switchable atrous convolution.

Two parallel convolutions see the same input with different receptive
fields: a 3x3 at dilation 1 and a 5x5 at dilation 2 (span 9). A 1x1
convolution followed by a sigmoid yields a one-channel spatial switch ``S``
and the block returns ``S * A + (1 - S) * B``, with ``S`` broadcast over
channels. Output width equals input width.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Conv
from .tensor import ConvSpec, ShapeError, Tensor, add, mul, sigmoid, sub


def receptive_field(spec: ConvSpec) -> int:
    """Span of a dilated kernel: k + (k - 1)(d - 1)."""
    return spec.kernel + (spec.kernel - 1) * (spec.dilation - 1)


@dataclass
class SACParams:
    branch_a: Conv
    branch_b: Conv
    switch: Conv

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32,
             small=(3, 1), large=(5, 2)) -> "SACParams":
        a = ConvSpec.same(small[0], channels, channels, dilation=small[1])
        b = ConvSpec.same(large[0], channels, channels, dilation=large[1])
        s = ConvSpec.same(1, channels, 1)
        return cls(Conv.init(a, rng, dtype), Conv.init(b, rng, dtype), Conv.init(s, rng, dtype))

    def __post_init__(self):
        a, b, s = self.branch_a.spec, self.branch_b.spec, self.switch.spec
        if (a.in_channels, a.out_channels) != (b.in_channels, b.out_channels):
            raise ShapeError(f"branch channel mismatch: {a} vs {b}")
        for spec in (a, b, s):
            if spec.stride != 1 or 2 * spec.padding != spec.dilation * (spec.kernel - 1):
                raise ShapeError(f"SAC convolutions must preserve spatial extent: {spec}")
        if s.out_channels != 1 or s.in_channels != a.in_channels:
            raise ShapeError(f"switch must map {a.in_channels} channels to 1: {s}")

    def named(self, prefix: str) -> dict:
        out = {}
        out.update(self.branch_a.named(f"{prefix}.a"))
        out.update(self.branch_b.named(f"{prefix}.b"))
        out.update(self.switch.named(f"{prefix}.switch"))
        return out


def switch_map(x: Tensor, params: SACParams) -> Tensor:
    return sigmoid(params.switch(x))


def sac_forward(x: Tensor, params: SACParams) -> Tensor:
    a = params.branch_a(x)
    b = params.branch_b(x)
    s = switch_map(x, params)
    # B + S (A - B) is the same convex blend with one fewer op
    return add(b, mul(s, sub(a, b)))
