"""Darknet-19 feature extractor with the final max-pool removed.

The stage layout follows Darknet-19: 19 convolutions (3x3 and 1x1), each
followed by batch norm and a leaky ReLU. Of the five 2x2 max-pools, the one
between the two deepest stages is dropped, so a 512x512 input ends at a
32x32 map (stride 16). The last activation at each of the four finest
resolutions is exported as a tap for the SAC/FPN path.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import ConvSpec, ShapeError, Tensor, batchnorm, conv2d, leaky_relu, maxpool2

# (kernel, width) per convolution; widths at paper scale
_DARKNET19_STAGES = (
    ((3, 32),),
    ((3, 64),),
    ((3, 128), (1, 64), (3, 128)),
    ((3, 256), (1, 128), (3, 256)),
    ((3, 512), (1, 256), (3, 512), (1, 256), (3, 512)),
    ((3, 1024), (1, 512), (3, 1024), (1, 512), (3, 1024), (1, 1024)),
)

DEFAULT_ANCHORS = ((1.0, 1.0), (2.0, 2.0), (4.0, 4.0), (2.0, 4.0), (4.0, 2.0))


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "pool"
    kernel: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class StageSpec:
    layers: tuple
    tap: bool = False


def darknet19_stages(width_divisor: int = 1) -> tuple:
    """Stage list with pools after the first four stages only."""
    stages = []
    for i, convs in enumerate(_DARKNET19_STAGES):
        layers = [LayerSpec("conv", k, max(1, w // width_divisor)) for k, w in convs]
        if i < 4:
            layers.append(LayerSpec("pool"))
        stages.append(StageSpec(tuple(layers), tap=i < 4))
    return tuple(stages)


class ConfigError(ValueError):
    """Raised for an inconsistent network or pipeline configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    input_resolution: int
    stages: tuple
    fpn_width: int
    input_channels: int = 1
    anchors: tuple = DEFAULT_ANCHORS
    num_classes: int = 1
    grid: int = 32
    sac_taps: tuple = (True, True, True, True)
    leaky_slope: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> "NetworkConfig":
        pools = sum(1 for s in self.stages for l in s.layers if l.kind == "pool")
        if self.input_resolution % (2**pools) or self.input_resolution // 2**pools != self.grid:
            raise ConfigError(
                f"input {self.input_resolution} / 2^{pools} pools does not give grid {self.grid}"
            )
        if len(self.tap_channels) != 4:
            raise ConfigError(f"expected 4 tapped stages, found {len(self.tap_channels)}")
        if len(self.sac_taps) != 4:
            raise ConfigError("sac_taps needs one flag per tap")
        if not self.anchors or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ConfigError(f"anchors must be non-empty and positive: {self.anchors}")
        if self.num_classes < 1 or self.fpn_width < 1:
            raise ConfigError("num_classes and fpn_width must be >= 1")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in [0, 1): {self.leaky_slope}")
        # tap resolutions must halve so the FPN top-down path lines up
        res = self.tap_resolutions
        if any(a != 2 * b for a, b in zip(res, res[1:])):
            raise ConfigError(f"tap resolutions must halve: {res}")
        return self

    @property
    def conv_layers(self) -> list:
        return [l for s in self.stages for l in s.layers if l.kind == "conv"]

    @property
    def tap_channels(self) -> tuple:
        out = []
        for s in self.stages:
            if s.tap:
                out.append([l for l in s.layers if l.kind == "conv"][-1].out_channels)
        return tuple(out)

    @property
    def tap_resolutions(self) -> tuple:
        return tuple(r for r, _ in self._walk() if r is not None)

    @property
    def final_channels(self) -> int:
        return self.conv_layers[-1].out_channels

    @property
    def final_resolution(self) -> int:
        return self._walk()[-1][1]

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def head_in_channels(self) -> int:
        return self.fpn_width + self.final_channels

    @property
    def head_out_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    def _walk(self) -> list:
        """(tap resolution or None, resolution after stage) per stage."""
        res = self.input_resolution
        rows = []
        for s in self.stages:
            tap_res = None
            for l in s.layers:
                if l.kind == "pool":
                    if s.tap and tap_res is None:
                        tap_res = res
                    res //= 2
            if s.tap and tap_res is None:
                tap_res = res
            rows.append((tap_res, res))
        return rows

    def with_overrides(self, **kw) -> "NetworkConfig":
        return replace(self, **kw).validate()


def paper_config(**overrides) -> NetworkConfig:
    """512x512 input, standard Darknet-19 widths, F=128, 32x32 grid."""
    cfg = NetworkConfig("paper", 512, darknet19_stages(1), fpn_width=128, grid=32)
    return replace(cfg, **overrides).validate()


def desk_config(**overrides) -> NetworkConfig:
    """64x64 input, widths divided by 8, F=16, 4x4 grid."""
    cfg = NetworkConfig("desk", 64, darknet19_stages(8), fpn_width=16, grid=4)
    return replace(cfg, **overrides).validate()


PRESETS = {"paper": paper_config, "desk": desk_config}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Parameterised layers
# ---------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class Conv:
    """Convolution with an optional bias."""

    spec: ConvSpec
    weight: Tensor
    bias: Optional[Tensor]

    @classmethod
    def init(cls, spec: ConvSpec, rng, dtype, bias: bool = True) -> "Conv":
        w = Tensor(he_normal(rng, spec.weight_shape, dtype), requires_grad=True)
        b = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True) if bias else None
        return cls(spec, w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


@dataclass
class ConvBN:
    """Bias-free convolution, batch norm, leaky ReLU."""

    conv: Conv
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor

    @classmethod
    def init(cls, spec: ConvSpec, rng, dtype) -> "ConvBN":
        c = spec.out_channels
        return cls(
            Conv.init(spec, rng, dtype, bias=False),
            Tensor(np.ones(c, dtype), requires_grad=True),
            Tensor(np.zeros(c, dtype), requires_grad=True),
            Tensor(np.zeros(c, dtype)),
            Tensor(np.ones(c, dtype)),
        )

    def __call__(self, x: Tensor, cfg: NetworkConfig, training: bool) -> Tensor:
        y = batchnorm(self.conv(x), self.gamma, self.beta, self.running_mean, self.running_var,
                      eps=cfg.bn_eps, training=training, momentum=cfg.bn_momentum)
        return leaky_relu(y, cfg.leaky_slope)

    def named(self, prefix: str) -> dict:
        out = self.conv.named(prefix)
        out[f"{prefix}.bn.gamma"] = self.gamma
        out[f"{prefix}.bn.beta"] = self.beta
        out[f"{prefix}.bn.running_mean"] = self.running_mean
        out[f"{prefix}.bn.running_var"] = self.running_var
        return out


@dataclass
class Backbone:
    config: NetworkConfig
    stages: list = field(default_factory=list)  # per stage: list of ConvBN or "pool"

    def named(self, prefix: str = "backbone") -> dict:
        out = {}
        idx = 0
        for stage in self.stages:
            for layer in stage:
                if layer == "pool":
                    continue
                out.update(layer.named(f"{prefix}.conv{idx}"))
                idx += 1
        return out


def build_backbone(config: NetworkConfig, seed: int = 0, dtype=np.float32,
                   rng: Optional[np.random.Generator] = None) -> Backbone:
    """He-initialised weights, batch-norm gamma 1 / beta 0; deterministic in ``seed``."""
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(seed)
    cin = config.input_channels
    stages = []
    for s in config.stages:
        layers = []
        for l in s.layers:
            if l.kind == "pool":
                layers.append("pool")
                continue
            spec = ConvSpec.same(l.kernel, cin, l.out_channels)
            layers.append(ConvBN.init(spec, rng, dtype))
            cin = l.out_channels
        stages.append(layers)
    return Backbone(config, stages)


def backbone_forward(backbone: Backbone, image: Tensor, training: bool = False):
    """Returns ([C1, C2, C3, C4] taps at strides 1/2/4/8, final stride-16 map)."""
    cfg = backbone.config
    if image.data.ndim != 4 or image.shape[1] != cfg.input_channels or \
            image.shape[2:] != (cfg.input_resolution, cfg.input_resolution):
        raise ShapeError(
            f"expected input (N, {cfg.input_channels}, {cfg.input_resolution}, {cfg.input_resolution}), "
            f"got {image.shape}"
        )
    x = image
    taps = []
    for spec, layers in zip(cfg.stages, backbone.stages):
        tapped = False
        for layer in layers:
            if layer == "pool":
                if spec.tap and not tapped:
                    taps.append(x)
                    tapped = True
                x = maxpool2(x)
            else:
                x = layer(x, cfg, training)
        if spec.tap and not tapped:
            taps.append(x)
    return taps, x


def backbone_shapes(config: NetworkConfig, batch: int = 1) -> tuple:
    """Tap and final-map shapes implied by ``config``, without running it."""
    config.validate()
    taps = tuple((batch, c, r, r) for c, r in zip(config.tap_channels, config.tap_resolutions))
    final = (batch, config.final_channels, config.final_resolution, config.final_resolution)
    return taps, final


def parameter_count(named: dict) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(t.data.size for t in named.values() if t.requires_grad)
