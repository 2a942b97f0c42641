from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foci.backbone import (
    ConfigError,
    backbone_forward,
    backbone_shapes,
    build_backbone,
    desk_config,
    paper_config,
    parameter_count,
    preset,
)
from foci.model import build_detector
from foci.tensor import ShapeError, Tensor

# Darknet-19 convolutions as (kernel, out channels), written out by hand
DARKNET19 = [(3, 32), (3, 64), (3, 128), (1, 64), (3, 128), (3, 256), (1, 128), (3, 256),
             (3, 512), (1, 256), (3, 512), (1, 256), (3, 512),
             (3, 1024), (1, 512), (3, 1024), (1, 512), (3, 1024), (1, 1024)]


def hand_count(div, fpn, taps=(32, 64, 128, 256), anchors=5, classes=1):
    """Trainable scalars by closed form: conv weights plus BN gamma/beta, then SAC, FPN, head."""
    cin, total = 1, 0
    for k, c in DARKNET19:
        c //= div
        total += k * k * cin * c + 2 * c
        cin = c
    backbone = total
    for c in (t // div for t in taps):
        total += (9 * c * c + c) + (25 * c * c + c) + (c + 1)  # branch A, branch B, switch
        total += (c * fpn + fpn) + (9 * fpn * fpn + fpn)  # lateral, smoothing
    total += 4 * fpn * fpn + fpn  # fusion
    out = anchors * (5 + classes)
    total += (fpn + cin) * out + out
    return backbone, total


PAPER_BACKBONE_PARAMS, PAPER_DETECTOR_PARAMS = hand_count(1, 128)
_, DESK_DETECTOR_PARAMS = hand_count(8, 16)


def _pools(cfg):
    return sum(1 for s in cfg.stages for l in s.layers if l.kind == "pool")


def test_paper_layout():
    cfg = paper_config()
    assert len(cfg.conv_layers) == 19
    assert _pools(cfg) == 4
    assert cfg.tap_resolutions == (512, 256, 128, 64)
    assert cfg.tap_channels == (32, 64, 128, 256)
    assert cfg.final_resolution == cfg.grid == 32
    assert cfg.final_channels == 1024


def test_desk_keeps_structure():
    paper, desk = paper_config(), desk_config()
    assert [l.kind for s in desk.stages for l in s.layers] == [l.kind for s in paper.stages for l in s.layers]
    assert [l.kernel for l in desk.conv_layers] == [l.kernel for l in paper.conv_layers]
    assert [l.out_channels * 8 for l in desk.conv_layers] == [l.out_channels for l in paper.conv_layers]
    assert desk.tap_resolutions == (64, 32, 16, 8)
    assert desk.final_resolution == desk.grid == 4


def test_paper_shapes_without_running():
    taps, final = backbone_shapes(paper_config(), batch=2)
    assert [t[2] for t in taps] == [512, 256, 128, 64]
    assert final == (2, 1024, 32, 32)


def test_desk_forward_shapes_batch_two():
    cfg = desk_config()
    bb = build_backbone(cfg, seed=1)
    taps, final = backbone_forward(bb, Tensor(np.zeros((2, 1, 64, 64), np.float32)))
    expected_taps, expected_final = backbone_shapes(cfg, batch=2)
    assert tuple(t.shape for t in taps) == expected_taps
    assert final.shape == expected_final == (2, 128, 4, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8))
def test_tap_strides_hold_for_any_valid_resolution(k):
    res = 16 * k
    cfg = desk_config(input_resolution=res, grid=k)
    assert cfg.tap_resolutions == (res, res // 2, res // 4, res // 8)
    assert cfg.final_resolution == res // 16


def test_grid_arithmetic_violation_rejected():
    with pytest.raises(ConfigError, match="grid"):
        desk_config(grid=8)
    with pytest.raises(ConfigError):
        build_backbone(replace(desk_config(), input_resolution=72))


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown network preset"):
        preset("huge")


def test_wrong_input_resolution_rejected():
    bb = build_backbone(desk_config())
    with pytest.raises(ShapeError, match="64"):
        backbone_forward(bb, Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def test_same_seed_same_parameters():
    a = build_backbone(desk_config(), seed=3).named()
    b = build_backbone(desk_config(), seed=3).named()
    c = build_backbone(desk_config(), seed=4).named()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if k.endswith("weight"))


def test_initialisation_scheme():
    named = build_backbone(desk_config(), seed=0).named()
    for k, t in named.items():
        if k.endswith("gamma") or k.endswith("running_var"):
            assert np.all(t.data == 1)
        elif k.endswith("beta") or k.endswith("running_mean"):
            assert np.all(t.data == 0)
    w = named["backbone.conv5.weight"].data
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert abs(w.std() - np.sqrt(2.0 / fan_in)) < 0.1 * np.sqrt(2.0 / fan_in)


def test_detector_biases_start_at_zero():
    named = build_detector(desk_config(), seed=0).named()
    biases = [t.data for k, t in named.items() if k.endswith(".bias")]
    assert biases and all(np.all(b == 0) for b in biases)


def test_zero_image_zero_weights_gives_beta_maps():
    cfg = desk_config()
    bb = build_backbone(cfg, seed=0)
    rng = np.random.default_rng(0)
    for k, t in bb.named().items():
        if k.endswith("weight"):
            t.data[...] = 0
        elif k.endswith("beta"):
            t.data[...] = rng.uniform(0.1, 1.0, t.shape)
    taps, final = backbone_forward(bb, Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    # positive beta passes the leaky unit unchanged, so each map is its last layer's beta
    last = [[l for l in stage if l != "pool"][-1] for stage in bb.stages]
    for tap, layer in zip(taps, last[:4]):
        assert np.allclose(tap.data, layer.beta.data[None, :, None, None], atol=1e-6)
    assert np.allclose(final.data, last[-1].beta.data[None, :, None, None], atol=1e-6)


def test_documented_constants():
    assert (PAPER_BACKBONE_PARAMS, PAPER_DETECTOR_PARAMS, DESK_DETECTOR_PARAMS) == (20_867_424, 24_580_770, 390_002)


def test_paper_parameter_counts():
    cfg = paper_config()
    bb = build_backbone(cfg, seed=0)
    assert parameter_count(bb.named()) == PAPER_BACKBONE_PARAMS
    det = build_detector(cfg, seed=0)
    assert parameter_count(det.named()) == PAPER_DETECTOR_PARAMS


def test_desk_parameter_count():
    assert parameter_count(build_detector(desk_config(), seed=0).named()) == DESK_DETECTOR_PARAMS
