import numpy as np
import pytest

from foci.backbone import Conv
from foci.sac import SACParams, receptive_field, sac_forward, switch_map
from foci.tensor import ConvSpec, ShapeError, Tensor, grad_check

from .oracles import zero_insert


def make_sac(rng, channels=2, dtype=np.float64):
    p = SACParams.init(channels, rng, dtype)
    for conv in (p.branch_a, p.branch_b, p.switch):
        conv.bias.data[...] = rng.standard_normal(conv.bias.shape)
    return p


def branches(x, p):
    return p.branch_a(x).data, p.branch_b(x).data


@pytest.mark.parametrize("k,d,span", [(3, 1, 3), (3, 2, 5), (5, 2, 9), (1, 4, 1)])
def test_receptive_field(k, d, span):
    assert receptive_field(ConvSpec(k, 1, 1, dilation=d)) == span


def test_receptive_field_matches_zero_inserted_support():
    w = np.ones((1, 1, 5, 5))
    dense = zero_insert(w, 2)
    rows = np.flatnonzero(dense[0, 0].any(axis=1))
    assert rows[-1] - rows[0] + 1 == receptive_field(ConvSpec(5, 1, 1, dilation=2)) == 9


def test_default_branch_layout():
    p = SACParams.init(4, np.random.default_rng(0))
    assert (p.branch_a.spec.kernel, p.branch_a.spec.dilation) == (3, 1)
    assert (p.branch_b.spec.kernel, p.branch_b.spec.dilation) == (5, 2)
    assert p.switch.spec.out_channels == 1


def test_output_is_pointwise_convex_combination():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(1000):
        c = int(rng.integers(1, 4))
        p = make_sac(rng, c)
        x = Tensor(rng.standard_normal((1, c, int(rng.integers(3, 8)), int(rng.integers(3, 8)))) * 3)
        a, b = branches(x, p)
        y = sac_forward(x, p).data
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        worst = max(worst, float(np.max(lo - y)), float(np.max(y - hi)))
    assert worst <= 1e-12


def test_switch_strictly_inside_unit_interval():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = make_sac(rng, 3)
        s = switch_map(Tensor(rng.standard_normal((2, 3, 6, 6))), p).data
        assert s.shape == (2, 1, 6, 6)
        assert np.all(s > 0) and np.all(s < 1)


@pytest.mark.parametrize("bias,branch", [(50.0, 0), (-50.0, 1)])
def test_saturated_switch_selects_one_branch(bias, branch):
    rng = np.random.default_rng(2)
    p = make_sac(rng, 3)
    p.switch.weight.data[...] = 0
    p.switch.bias.data[...] = bias
    x = Tensor(rng.standard_normal((2, 3, 7, 7)))
    expected = branches(x, p)[branch]
    assert np.max(np.abs(sac_forward(x, p).data - expected)) < 1e-8


def test_equivalent_branches_make_switch_irrelevant():
    rng = np.random.default_rng(3)
    p = make_sac(rng, 2)
    centre = rng.standard_normal((2, 2))
    # only the shared centre tap is non-zero, so both branches compute the same 1x1 map
    p.branch_a.weight.data[...] = 0
    p.branch_b.weight.data[...] = 0
    p.branch_a.weight.data[:, :, 1, 1] = centre
    p.branch_b.weight.data[:, :, 2, 2] = centre
    p.branch_b.bias.data[...] = p.branch_a.bias.data
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    a, _ = branches(x, p)
    for _ in range(5):
        p.switch.weight.data[...] = rng.standard_normal(p.switch.weight.shape) * 5
        assert np.max(np.abs(sac_forward(x, p).data - a)) < 1e-12


@pytest.mark.parametrize("res", [512, 256, 128, 64])
def test_preserves_extent_at_paper_tap_resolutions(res):
    p = SACParams.init(1, np.random.default_rng(4), np.float32)
    y = sac_forward(Tensor(np.zeros((1, 1, res, res), np.float32)), p)
    assert y.shape == (1, 1, res, res)


def test_gradients_flow_through_both_branches_and_switch():
    rng = np.random.default_rng(5)
    p = make_sac(rng, 2)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    params = [p.branch_a.weight, p.branch_a.bias, p.branch_b.weight, p.branch_b.bias,
              p.switch.weight, p.switch.bias]

    def fn(x, aw, ab, bw, bb, sw, sb):
        q = SACParams(Conv(p.branch_a.spec, aw, ab), Conv(p.branch_b.spec, bw, bb), Conv(p.switch.spec, sw, sb))
        return sac_forward(x, q)

    res = grad_check(fn, [x, *params])
    assert res.passed, res


def test_rejects_shape_changing_branch():
    rng = np.random.default_rng(6)
    good = SACParams.init(2, rng, np.float64)
    bad_b = Conv.init(ConvSpec(5, 2, 2, padding=2, dilation=2), rng, np.float64)
    with pytest.raises(ShapeError, match="preserve"):
        SACParams(good.branch_a, bad_b, good.switch)
    wide_switch = Conv.init(ConvSpec(1, 2, 2), rng, np.float64)
    with pytest.raises(ShapeError, match="switch"):
        SACParams(good.branch_a, good.branch_b, wide_switch)
