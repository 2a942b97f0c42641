"""Dense NCHW tensors, the differentiable primitives used by the detector, and
a reverse-mode gradient tape.

Every op takes and returns :class:`Tensor`. When a :class:`GradientTape` is
active and at least one input requires a gradient, the op appends a node to
the tape holding a closure that maps the output gradient to input gradients.
:func:`backward` replays those nodes in reverse.

Ops preserve the floating dtype of their inputs: float64 for gradient checks,
float32 for training and inference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvSpec",
    "GradientTape",
    "backward",
    "grad_check",
    "GradCheckResult",
    "conv2d",
    "maxpool2",
    "upsample_nearest2",
    "batchnorm",
    "leaky_relu",
    "sigmoid",
    "exp",
    "add",
    "sub",
    "mul",
    "sum_all",
    "concat_channels",
    "slice_channels",
    "avgpool_to",
]


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class Tensor:
    """A dense array of rank <= 4 with an optional gradient slot.

    Feature maps are rank 4 in (N, C, H, W) order. Per-channel parameter
    vectors are rank 1 and the training loss is rank 0.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors have rank <= 4, got shape {arr.shape}")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    """Square-kernel convolution geometry."""

    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"kernel, stride and dilation must be >= 1: {self}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")

    @classmethod
    def same(cls, kernel: int, in_channels: int, out_channels: int, dilation: int = 1) -> "ConvSpec":
        """Stride-1 spec whose zero padding keeps spatial extents unchanged."""
        span = dilation * (kernel - 1)
        if span % 2:
            raise ValueError(f"kernel {kernel} with dilation {dilation} has no symmetric same padding")
        return cls(kernel, in_channels, out_channels, 1, span // 2, dilation)

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_extent(self, extent: int) -> int:
        padded = extent + 2 * self.padding
        if self.effective_kernel > padded:
            raise ShapeError(
                f"effective kernel {self.effective_kernel} exceeds padded input extent {padded}"
            )
        return (padded - self.dilation * (self.kernel - 1) - 1) // self.stride + 1


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE: list = []


class GradientTape:
    """Records ops executed inside its ``with`` block.

    Nodes are appended in execution order; :func:`backward` walks them in
    reverse. Tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, fn) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(op, tuple(inputs), out, fn))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) through ``tape``.

    Returns a mapping from every leaf tensor that requires a gradient (one not
    produced by a node on this tape) to its accumulated gradient, and also
    stores that gradient in ``leaf.grad``. Contributions from multiple
    consumers add.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = buffers.pop(id(node.output), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in buffers:
                buffers[key] = np.zeros_like(t.data)
                owners[key] = t
            buffers[key] += g
    grads = {}
    for key, g in buffers.items():
        if key in produced:
            continue
        t = owners[key]
        t.grad = g
        grads[t] = g
    return grads


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, s: int, d: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded input as a (N*Ho*Wo, C*k*k) matrix."""
    n, c = xp.shape[:2]
    span = d * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, ::d, ::d]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Dilated cross-correlation with zero padding.

    ``weight`` is (out_channels, in_channels, k, k) and ``bias`` a length
    out_channels vector or None.
    """
    _require_rank4(x, "conv2d")
    n, c, h, w = x.shape
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, convolution expects {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match ({spec.out_channels},)")
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    k, s, p, d = spec.kernel, spec.stride, spec.padding, spec.dilation

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, d, ho, wo)
    wm = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out_t = Tensor(np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * d : i * d + s * (ho - 1) + 1 : s,
                        j * d : j * d + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out_t, grad_fn)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    The gradient goes to the first maximal position of each window in
    row-major scan order.
    """
    _require_rank4(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = Tensor(np.take_along_axis(win, idx, axis=-1)[..., 0])

    def grad_fn(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return _record("maxpool2", (x,), out, grad_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    _require_rank4(x, "upsample_nearest2")
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample_nearest2", (x,), out, grad_fn)


def avgpool_to(x: Tensor, target: tuple) -> Tensor:
    """Average non-overlapping blocks so the map becomes ``target`` = (H', W')."""
    _require_rank4(x, "avgpool_to")
    n, c, h, w = x.shape
    th, tw = target
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ShapeError(f"target {th}x{tw} does not divide source {h}x{w}")
    bh, bw = h // th, w // tw
    out = Tensor(x.data.reshape(n, c, th, bh, tw, bw).mean(axis=(3, 5)))

    def grad_fn(g):
        scaled = g / (bh * bw)
        return (np.broadcast_to(scaled[:, :, :, None, :, None], (n, c, th, bh, tw, bw)).reshape(n, c, h, w),)

    return _record("avgpool_to", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics (biased variance) normalise the
    input and the running statistics are blended towards them in place, using
    the unbiased variance. Inference mode uses the running statistics.
    """
    _require_rank4(x, "batchnorm")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    for v, label in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        if v.shape != (c,):
            raise ShapeError(f"{label} has shape {v.shape}, expected ({c},)")
    axes = (0, 2, 3)
    g4 = gamma.data[None, :, None, None]
    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mean
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * unbiased
    else:
        m = None
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(g4 * xhat + beta.data[None, :, None, None])

    def grad_fn(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                s1 = dxhat.sum(axis=axes)[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return _record("batchnorm", (x, gamma, beta), out, grad_fn)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.data * alpha))

    def grad_fn(g):
        return (np.where(pos, g, g * alpha),)

    return _record("leaky_relu", (x,), out, grad_fn)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", (x,), out, grad_fn)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)

    def grad_fn(g):
        return (g * e,)

    return _record("exp", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# Elementwise arithmetic with broadcasting
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum_all", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# Channel structure
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack maps along the channel axis in argument order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in parts:
        _require_rank4(t, "concat_channels")
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concatenate {parts[0].shape} with {t.shape}")
    widths = [t.shape[1] for t in parts]
    out = Tensor(np.concatenate([t.data for t in parts], axis=1))
    bounds = np.cumsum([0] + widths)

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_channels", tuple(parts), out, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_rank4(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) outside 0..{x.shape[1]}")
    out = Tensor(x.data[:, start:stop].copy())

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice_channels", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Largest relative discrepancy between tape and central-difference gradients.

    ``fn(*inputs)`` may return a tensor of any shape; it is reduced to a scalar
    by a fixed random projection so that every output element contributes.
    The perturbation for an element with value v is ``step * max(1, |v|)``.
    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    Exceeding ``tolerance`` is reported through ``passed``, never raised.
    Inputs should be float64.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape) if probe.data.size > 1 else None

    def scalar(out: Tensor) -> Tensor:
        return out if weights is None else sum_all(mul(out, Tensor(weights)))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with GradientTape() as tape:
        loss = scalar(fn(*inputs))
    grads = backward(tape, loss)

    def value() -> float:
        return float(scalar(fn(*inputs)).data)

    worst = 0.0
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), abs(numeric), floor)
            worst = max(worst, err)
    return GradCheckResult(worst, tolerance)
