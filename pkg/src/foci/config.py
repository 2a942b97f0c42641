"""Pipeline configuration file.

A line-oriented ``key = value`` file with ``[section]`` headers, read with
:mod:`configparser`. Sections and keys::

    [network]  preset, num_classes, anchors, fpn_width, leaky_slope,
               bn_momentum, bn_eps, sac_taps
    [train]    learning_rate, batch_size, epochs, beta1, beta2, epsilon,
               seed, checkpoint_every, lambda_coord, lambda_noobj
    [synth]    image_size, count_min, count_max, radius_min, radius_max,
               contrast_min, contrast_max, background, noise_std,
               cluster_probability, cluster_spread, min_spacing, seed
    [eval]     iou_threshold, nms_threshold, conf_threshold, score_floor
    [paths]    free-form names, kept as strings

``anchors`` is ``w,h; w,h; ...`` in grid cells and ``sac_taps`` four 0/1
flags. Anything not given falls back to the preset named in
``[network] preset`` (default ``desk``). Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import ConfigError, NetworkConfig, preset as network_preset
from .synth import SynthConfig
from .train import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.25
    nms_threshold: float = 0.45
    conf_threshold: float = 0.25  # counting and inference
    score_floor: float = 0.005  # lowest score that still enters the PR curve

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class PipelineConfig:
    preset: str
    network: NetworkConfig
    train: TrainConfig
    synth: SynthConfig
    eval: EvalConfig
    paths: dict = field(default_factory=dict)


def default_config(preset: str = "desk") -> PipelineConfig:
    net = network_preset(preset)
    if preset == "paper":
        train = TrainConfig.paper()
        synth = SynthConfig(image_size=512, count_min=5, count_max=40, radius_min=4.0, radius_max=14.0,
                            cluster_probability=0.3, min_spacing=20.0)
    else:
        train, synth = TrainConfig.desk(), SynthConfig()
    return PipelineConfig(preset, net, train, synth, EvalConfig())


def _anchors(text: str) -> tuple:
    pairs = []
    for chunk in text.split(";"):
        if chunk.strip():
            w, h = (float(v) for v in chunk.split(","))
            pairs.append((w, h))
    return tuple(pairs)


def _flags(text: str) -> tuple:
    return tuple(bool(int(v)) for v in text.split(","))


_NETWORK_KEYS = {
    "num_classes": int,
    "anchors": _anchors,
    "fpn_width": int,
    "leaky_slope": float,
    "bn_momentum": float,
    "bn_eps": float,
    "sac_taps": _flags,
}


def _typed(cls, section: configparser.SectionProxy, name: str) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        conv = {"int": int, "float": float}.get(types[key] if isinstance(types[key], str) else types[key].__name__, str)
        try:
            out[key] = conv(raw)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {raw!r} is not a valid {conv.__name__}") from None
    return out


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    allowed = {"network", "train", "synth", "eval", "paths"}
    for s in cp.sections():
        if s not in allowed:
            raise ConfigError(f"{source}: unknown section [{s}]")

    net_sec = cp["network"] if cp.has_section("network") else {}
    base = default_config(net_sec.get("preset", "desk"))
    overrides = {}
    for key, raw in net_sec.items():
        if key == "preset":
            continue
        if key not in _NETWORK_KEYS:
            raise ConfigError(f"{source}: [network] unknown key {key!r}")
        try:
            overrides[key] = _NETWORK_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"{source}: [network] {key} = {raw!r} could not be parsed") from None
    try:
        network = base.network.with_overrides(**overrides) if overrides else base.network
        train = replace(base.train, **_typed(TrainConfig, cp["train"], "train")) if cp.has_section("train") else base.train
        synth = replace(base.synth, **_typed(SynthConfig, cp["synth"], "synth")) if cp.has_section("synth") else base.synth
        ev = replace(base.eval, **_typed(EvalConfig, cp["eval"], "eval")) if cp.has_section("eval") else base.eval
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    paths = dict(cp["paths"]) if cp.has_section("paths") else {}
    return PipelineConfig(base.preset, network, train, synth, ev, paths)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: PipelineConfig) -> str:
    """Text form that :func:`parse_config` reads back to an equal config."""
    net = cfg.network
    lines = ["[network]", f"preset = {cfg.preset}", f"num_classes = {net.num_classes}",
             "anchors = " + "; ".join(f"{w!r},{h!r}" for w, h in net.anchors),
             f"fpn_width = {net.fpn_width}", f"leaky_slope = {net.leaky_slope!r}",
             f"bn_momentum = {net.bn_momentum!r}", f"bn_eps = {net.bn_eps!r}",
             "sac_taps = " + ",".join(str(int(f)) for f in net.sac_taps), ""]
    for name, obj in (("train", cfg.train), ("synth", cfg.synth), ("eval", cfg.eval)):
        lines.append(f"[{name}]")
        lines.extend(f"{f.name} = {getattr(obj, f.name)!r}" for f in fields(obj))
        lines.append("")
    if cfg.paths:
        lines.append("[paths]")
        lines.extend(f"{k} = {v}" for k, v in cfg.paths.items())
        lines.append("")
    return "\n".join(lines)
