"""Full detector: backbone, SAC on each tap, FPN, fusion and head.

The fused pyramid map (F channels at the head grid) is concatenated with the
backbone's final stride-16 map before the 1x1 head, so the deepest Darknet
stages take part in prediction.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .backbone import Backbone, Conv, NetworkConfig, backbone_forward, build_backbone
from .formats import ArchitectureMismatch
from .fpn import FPNParams, build_pyramid, fuse_pyramid
from .head import AnchorSet, decode, head_forward
from .sac import SACParams, sac_forward
from .tensor import ConvSpec, Tensor, concat_channels


@dataclass
class Detector:
    config: NetworkConfig
    backbone: Backbone
    sacs: list  # SACParams or None per tap
    fpn: FPNParams
    head: Conv

    @property
    def anchors(self) -> AnchorSet:
        return AnchorSet(tuple(self.config.anchors))

    def named(self) -> dict:
        """All tensors (trainable and running statistics) by stable name, in build order."""
        out = dict(self.backbone.named("backbone"))
        for i, sac in enumerate(self.sacs):
            if sac is not None:
                out.update(sac.named(f"sac{i}"))
        out.update(self.fpn.named("fpn"))
        out.update(self.head.named("head"))
        return out

    def parameters(self) -> dict:
        return {k: t for k, t in self.named().items() if t.requires_grad}

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        taps, final = backbone_forward(self.backbone, images, training)
        taps = [sac_forward(t, s) if s is not None else t for t, s in zip(taps, self.sacs)]
        fused = fuse_pyramid(build_pyramid(taps, self.fpn), self.fpn, self.config.grid)
        return head_forward(concat_channels([fused, final]), self.head)

    __call__ = forward

    def predict(self, images: np.ndarray, conf_threshold: float, batch_size: int = 16) -> list:
        """Decoded detections per image, inference-mode batch norm."""
        out = []
        dtype = self.head.weight.dtype
        for start in range(0, len(images), batch_size):
            raw = self.forward(Tensor(np.asarray(images[start : start + batch_size], dtype=dtype)))
            out.extend(decode(raw, self.anchors, conf_threshold))
        return out


def build_detector(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Detector:
    """Deterministic initialisation: one generator seeded by ``seed`` feeds every block in order."""
    config.validate()
    rng = np.random.default_rng(seed)
    backbone = build_backbone(config, rng=rng, dtype=dtype)
    sacs = [SACParams.init(c, rng, dtype) if on else None
            for c, on in zip(config.tap_channels, config.sac_taps)]
    fpn = FPNParams.init(config.tap_channels, config.fpn_width, config.fpn_width, rng, dtype)
    head = Conv.init(ConvSpec.same(1, config.head_in_channels, config.head_out_channels), rng, dtype)
    return Detector(config, backbone, sacs, fpn, head)


def load_state(detector: Detector, state: dict, strict: bool = True) -> None:
    """Copy arrays from ``state`` into the detector, checking every name and shape."""
    named = detector.named()
    if strict:
        missing = [k for k in named if k not in state]
        extra = [k for k in state if k not in named]
        if missing:
            raise ArchitectureMismatch(f"weight file lacks parameter {missing[0]!r}")
        if extra:
            raise ArchitectureMismatch(f"weight file has unexpected parameter {extra[0]!r}")
    for k, t in named.items():
        if k not in state:
            continue
        arr = np.asarray(state[k])
        if arr.shape != t.shape:
            raise ArchitectureMismatch(
                f"parameter {k!r}: expected shape {t.shape}, weight file has {arr.shape}")
    for k, t in named.items():
        if k in state:
            t.data[...] = state[k]


def state_arrays(detector: Detector) -> dict:
    return {k: t.data for k, t in detector.named().items()}


def clone_state(detector: Detector) -> dict:
    return {k: t.data.copy() for k, t in detector.named().items()}
