"""YOLOv2-style anchor head: raw prediction layout, decoding, target
assignment and the training loss.

Raw predictions have ``B * (5 + C)`` channels on a G x G grid. For anchor
``b`` the channels ``b*(5+C) .. b*(5+C)+4`` hold t_x, t_y, t_w, t_h, t_o and
the next C hold class logits. A cell at column cx, row cy with anchor
(pw, ph) in grid units decodes to::

    b_x = (sigmoid(t_x) + cx) / G        b_w = pw * exp(t_w) / G
    b_y = (sigmoid(t_y) + cy) / G        b_h = ph * exp(t_h) / G
    confidence = sigmoid(t_o) * max softmax(class logits)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import Conv
from .tensor import ShapeError, Tensor, _record, _sigmoid


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, centre and size normalised to the image."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive: {self}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box centre must lie in [0, 1]: {self}")

    @property
    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self) -> tuple:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float
    index: int


@dataclass(frozen=True)
class AnchorSet:
    priors: tuple  # ((w, h), ...) in grid-cell units

    def __post_init__(self):
        if not self.priors or any(w <= 0 or h <= 0 for w, h in self.priors):
            raise ValueError(f"anchors must be non-empty and strictly positive: {self.priors}")

    def __len__(self) -> int:
        return len(self.priors)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.priors, dtype=np.float64)


def _split(raw: Tensor, num_anchors: int) -> np.ndarray:
    n, ch, gh, gw = raw.shape
    if ch % num_anchors or ch // num_anchors < 5:
        raise ShapeError(f"{ch} channels cannot hold {num_anchors} anchors of 5+C values")
    if gh != gw:
        raise ShapeError(f"head grid must be square, got {gh}x{gw}")
    return raw.data.reshape(n, num_anchors, ch // num_anchors, gh, gw)


def head_forward(fused: Tensor, head: Conv) -> Tensor:
    """Single 1x1 convolution, no activation."""
    if fused.data.ndim != 4 or fused.shape[1] != head.spec.in_channels:
        raise ShapeError(f"head expects {head.spec.in_channels} input channels, got shape {fused.shape}")
    return head(fused)


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def decode(raw: Tensor, anchors: AnchorSet, conf_threshold: float) -> list:
    """Per-image lists of :class:`Detection` above ``conf_threshold``.

    Indices run 1..n by descending confidence; equal scores keep
    (anchor, row, column) scan order.
    """
    r = _split(raw, len(anchors)).astype(np.float64)
    n, b, _, g, _ = r.shape
    pri = anchors.array
    col = np.arange(g)[None, None, None, :]
    row = np.arange(g)[None, None, :, None]
    bx = (_sigmoid(r[:, :, 0]) + col) / g
    by = (_sigmoid(r[:, :, 1]) + row) / g
    bw = pri[:, 0][None, :, None, None] * np.exp(r[:, :, 2]) / g
    bh = pri[:, 1][None, :, None, None] * np.exp(r[:, :, 3]) / g
    obj = _sigmoid(r[:, :, 4])
    if r.shape[2] > 5:
        probs = _softmax(r[:, :, 5:], axis=2)
        cls = probs.argmax(axis=2)
        conf = obj * probs.max(axis=2)
    else:
        cls = np.zeros(obj.shape, dtype=np.int64)
        conf = obj
    out = []
    for i in range(n):
        c = conf[i].reshape(-1)
        keep = np.flatnonzero(c >= conf_threshold)
        keep = keep[np.argsort(-c[keep], kind="stable")]
        dets = []
        for rank, k in enumerate(keep, start=1):
            box = BBox(float(bx[i].flat[k]), float(by[i].flat[k]), float(bw[i].flat[k]), float(bh[i].flat[k]))
            dets.append(Detection(box, int(cls[i].flat[k]), float(c[k]), rank))
        out.append(dets)
    return out


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Dense (N, B, G, G) target arrays; entries outside ``mask`` are unused."""

    mask: np.ndarray
    off_x: np.ndarray
    off_y: np.ndarray
    log_w: np.ndarray
    log_h: np.ndarray
    boxes: np.ndarray  # (N, B, G, G, 4) as cx, cy, w, h
    classes: np.ndarray
    displaced: int = 0

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def shape_iou(w: float, h: float, priors: np.ndarray) -> np.ndarray:
    """IoU of co-centred boxes."""
    inter = np.minimum(w, priors[:, 0]) * np.minimum(h, priors[:, 1])
    return inter / (w * h + priors[:, 0] * priors[:, 1] - inter)


def assign_targets(gts: Sequence, anchors: AnchorSet, grid: int) -> Assignment:
    """Match every ground-truth box to the cell holding its centre and its best-shaped anchor.

    ``gts`` is a per-image sequence of ``(BBox, class_id)``. When two boxes
    claim the same (cell, anchor), the larger one keeps it (earlier index on
    equal area) and the other is dropped for this batch.
    """
    n, b, g = len(gts), len(anchors), grid
    pri = anchors.array
    shape = (n, b, g, g)
    a = Assignment(
        np.zeros(shape, bool), np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape),
        np.tile(np.array([0.5, 0.5, 1.0, 1.0]), shape + (1,)), np.zeros(shape, np.int64),
    )
    for i, image_gts in enumerate(gts):
        order = sorted(range(len(image_gts)), key=lambda j: -(image_gts[j][0].w * image_gts[j][0].h))
        for j in order:
            box, cls = image_gts[j]
            col = min(int(box.cx * g), g - 1)
            row = min(int(box.cy * g), g - 1)
            k = int(np.argmax(shape_iou(box.w * g, box.h * g, pri)))
            if a.mask[i, k, row, col]:
                a.displaced += 1
                continue
            a.mask[i, k, row, col] = True
            a.off_x[i, k, row, col] = box.cx * g - col
            a.off_y[i, k, row, col] = box.cy * g - row
            a.log_w[i, k, row, col] = np.log(box.w * g / pri[k, 0])
            a.log_h[i, k, row, col] = np.log(box.h * g / pri[k, 1])
            a.boxes[i, k, row, col] = box.as_tuple()
            a.classes[i, k, row, col] = cls
    return a


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def iou_with_grad(bx, by, bw, bh, gx, gy, gw, gh):
    """Elementwise IoU of centre-size boxes and its gradient w.r.t. the first box."""
    l1, r1, l2, r2 = bx - bw / 2, bx + bw / 2, gx - gw / 2, gx + gw / 2
    t1, d1, t2, d2 = by - bh / 2, by + bh / 2, gy - gh / 2, gy + gh / 2
    iw = np.minimum(r1, r2) - np.maximum(l1, l2)
    ih = np.minimum(d1, d2) - np.maximum(t1, t2)
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = bw * bh + gw * gh - inter
    iou = inter / union

    d_inter = (union + inter) / union**2
    d_area = -inter / union**2
    rmin, lmax = (r1 < r2), (l1 > l2)
    bmin, tmax = (d1 < d2), (t1 > t2)
    diw_dx = rmin.astype(float) - lmax
    diw_dw = 0.5 * rmin + 0.5 * lmax
    dih_dy = bmin.astype(float) - tmax
    dih_dh = 0.5 * bmin + 0.5 * tmax
    ih_o, iw_o = np.where(overlap, ih, 0.0), np.where(overlap, iw, 0.0)
    g_x = d_inter * ih_o * diw_dx
    g_y = d_inter * iw_o * dih_dy
    g_w = d_inter * ih_o * diw_dw + d_area * bh
    g_h = d_inter * iw_o * dih_dh + d_area * bw
    return iou, (g_x, g_y, g_w, g_h)


@dataclass(frozen=True)
class LossTerms:
    coord: float
    obj: float
    noobj: float
    cls: float


def yolo_loss(raw: Tensor, targets: Assignment, anchors: AnchorSet,
              lambda_coord: float = 5.0, lambda_noobj: float = 0.5,
              terms: Optional[list] = None) -> Tensor:
    """Scalar YOLOv2 loss averaged over the batch, recorded as one tape op.

    Assigned anchors pay ``lambda_coord`` times the squared error of
    sigmoid(t_x), sigmoid(t_y) against the in-cell offsets and of t_w, t_h
    against log(gt / anchor), plus (sigmoid(t_o) - IoU)^2 where IoU is between
    the decoded and the ground-truth box, plus class cross-entropy.
    Unassigned anchors pay ``lambda_noobj * sigmoid(t_o)^2``. The IoU target
    is differentiated too, so the recorded gradient is the exact gradient of
    the returned value.

    If ``terms`` is a list, a :class:`LossTerms` breakdown is appended.
    """
    r = _split(raw, len(anchors))
    n, b, depth, g, _ = r.shape
    if targets.mask.shape != (n, b, g, g):
        raise ShapeError(f"targets shaped {targets.mask.shape} do not match predictions {(n, b, g, g)}")
    dt = raw.dtype
    m = targets.mask.astype(dt)
    free = 1.0 - m
    pri = anchors.array.astype(dt)
    pw, ph = pri[:, 0][None, :, None, None], pri[:, 1][None, :, None, None]
    col = np.arange(g, dtype=dt)[None, None, None, :]
    row = np.arange(g, dtype=dt)[None, None, :, None]

    sx, sy, so = _sigmoid(r[:, :, 0]), _sigmoid(r[:, :, 1]), _sigmoid(r[:, :, 4])
    ex, ey = sx - targets.off_x.astype(dt), sy - targets.off_y.astype(dt)
    ew, eh = r[:, :, 2] - targets.log_w.astype(dt), r[:, :, 3] - targets.log_h.astype(dt)
    coord = lambda_coord * np.sum(m * (ex * ex + ey * ey + ew * ew + eh * eh))

    bw = pw * np.exp(r[:, :, 2]) / g
    bh = ph * np.exp(r[:, :, 3]) / g
    gt = targets.boxes.astype(dt)
    iou, (gix, giy, giw, gih) = iou_with_grad(
        (sx + col) / g, (sy + row) / g, bw, bh, gt[..., 0], gt[..., 1], gt[..., 2], gt[..., 3])
    eo = so - iou
    obj = np.sum(m * eo * eo)
    noobj = lambda_noobj * np.sum(free * so * so)

    cls_loss = 0.0
    probs = None
    if depth > 5:
        probs = _softmax(r[:, :, 5:], axis=2)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, targets.classes[:, :, None], 1.0, axis=2)
        picked = np.take_along_axis(probs, targets.classes[:, :, None], axis=2)[:, :, 0]
        cls_loss = -np.sum(m * np.log(np.maximum(picked, np.finfo(dt).tiny)))

    total = (coord + obj + noobj + cls_loss) / n
    if terms is not None:
        terms.append(LossTerms(float(coord / n), float(obj / n), float(noobj / n), float(cls_loss / n)))
    out = Tensor(np.asarray(total, dtype=dt))

    def grad_fn(gout):
        scale = gout / n
        d = np.zeros_like(r)
        dsx, dsy, dso = sx * (1 - sx), sy * (1 - sy), so * (1 - so)
        d[:, :, 0] = 2 * lambda_coord * m * ex * dsx - 2 * m * eo * gix * dsx / g
        d[:, :, 1] = 2 * lambda_coord * m * ey * dsy - 2 * m * eo * giy * dsy / g
        d[:, :, 2] = 2 * lambda_coord * m * ew - 2 * m * eo * giw * bw
        d[:, :, 3] = 2 * lambda_coord * m * eh - 2 * m * eo * gih * bh
        d[:, :, 4] = 2 * m * eo * dso + 2 * lambda_noobj * free * so * dso
        if probs is not None:
            d[:, :, 5:] = m[:, :, None] * (probs - onehot)
        return ((d * scale).reshape(raw.shape),)

    return _record("yolo_loss", (raw,), out, grad_fn)


def encode_box(box: BBox, cell: tuple, prior: tuple, grid: int) -> tuple:
    """Raw (t_x, t_y, t_w, t_h) that decode exactly to ``box`` from ``cell`` = (col, row)."""
    ox, oy = box.cx * grid - cell[0], box.cy * grid - cell[1]
    if not (0 < ox < 1 and 0 < oy < 1):
        raise ValueError(f"centre of {box} is not strictly inside cell {cell}; no finite encoding")
    return (float(np.log(ox / (1 - ox))), float(np.log(oy / (1 - oy))),
            float(np.log(box.w * grid / prior[0])), float(np.log(box.h * grid / prior[1])))


# ---------------------------------------------------------------------------
# Anchor priors
# ---------------------------------------------------------------------------

def kmeans_anchors(shapes: np.ndarray, k: int, seed: int = 0, max_iter: int = 300) -> tuple:
    """Cluster (w, h) shapes with 1 - IoU distance; returns priors sorted by area."""
    shapes = np.asarray(shapes, dtype=np.float64)
    if len(shapes) < k:
        raise ValueError(f"need at least {k} shapes, got {len(shapes)}")
    rng = np.random.default_rng(seed)
    centers = shapes[rng.choice(len(shapes), k, replace=False)].copy()
    assign = None
    for _ in range(max_iter):
        dist = np.stack([1.0 - shape_iou(w, h, centers) for w, h in shapes])
        new = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = shapes[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return tuple((float(w), float(h)) for w, h in centers[order])
