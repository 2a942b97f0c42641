"""Box overlap, non-maximum suppression, detection matching, PR curves,
average precision and foci counting.

AP uses all-point interpolation: the area under the running-maximum
precision envelope, accumulated exactly in rationals and rounded once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .head import BBox, Detection


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners so that identical boxes give exactly 1.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _priority(d: Detection):
    return (-d.score, d.index)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list:
    """Greedy per-class suppression of overlaps above ``iou_threshold``.

    Candidates are visited by descending score, lower detection index first on
    ties. The survivors come back in the same order.
    """
    kept: list = []
    for d in sorted(dets, key=_priority):
        if all(k.class_id != d.class_id or iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_threshold: float) -> list:
    """TP/FP flag per detection, greedy in the given (descending-score) order.

    A detection takes the unmatched ground truth of its class with the
    highest IoU, if that IoU reaches the threshold. Ties go to the earlier
    ground truth. Each ground truth matches at most once.
    """
    used = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j, (box, cls) in enumerate(gts):
            if used[j] or cls != d.class_id:
                continue
            v = iou(d.bbox, box)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _pr_exact(flags: Sequence[bool], n_gt: int) -> list:
    tp = 0
    pts = []
    for rank, f in enumerate(flags, start=1):
        tp += bool(f)
        pts.append((Fraction(tp, n_gt), Fraction(tp, rank)))
    return pts


def pr_curve(flags: Sequence[bool], n_gt: int) -> list:
    """Cumulative (recall, precision) after each ranked detection."""
    if n_gt < 1:
        return []
    return [(float(r), float(p)) for r, p in _pr_exact(flags, n_gt)]


def ap(flags: Sequence[bool], n_gt: int) -> Optional[float]:
    """All-point interpolated AP, or None when there is no ground truth."""
    if n_gt < 1:
        return None
    pts = _pr_exact(flags, n_gt)
    total = Fraction(0)
    env = Fraction(0)
    # sweep from the lowest-ranked point so the envelope is a running max
    for i in range(len(pts) - 1, -1, -1):
        recall, precision = pts[i]
        env = max(env, precision)
        lower = pts[i - 1][0] if i > 0 else Fraction(0)
        if recall != lower:
            total += (recall - lower) * env
    return float(total)


def map_at(aps: Sequence[Optional[float]]) -> Optional[float]:
    """Mean over classes whose AP is defined."""
    defined = [a for a in aps if a is not None]
    if not defined:
        return None
    return sum(defined) / len(defined)


@dataclass(frozen=True)
class FociCount:
    count: int
    labels: list
    detections: list


def count_foci(dets: Sequence[Detection], conf_threshold: float) -> FociCount:
    """Detections at or above the threshold, re-indexed 1..n by descending score."""
    kept = sorted((d for d in dets if d.score >= conf_threshold), key=_priority)
    relabelled = [Detection(d.bbox, d.class_id, d.score, i) for i, d in enumerate(kept, start=1)]
    labels = [f"Cell: {d.score:.4f} {d.index}" for d in relabelled]
    return FociCount(len(relabelled), labels, relabelled)


@dataclass
class ClassReport:
    class_id: int
    n_gt: int
    ap: Optional[float]
    pr: list
    max_recall: float


@dataclass
class EvalReport:
    iou_threshold: float
    classes: list
    mAP: Optional[float]
    max_recall: float
    total_gt: int
    foci_counts: list = field(default_factory=list)  # (image name, count)
    settings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "settings": dict(self.settings),
            "mAP": self.mAP,
            "max_recall": self.max_recall,
            "total_gt": self.total_gt,
            "classes": [
                {
                    "class_id": c.class_id,
                    "n_gt": c.n_gt,
                    "ap": c.ap,
                    "max_recall": c.max_recall,
                    "pr": [[r, p] for r, p in c.pr],
                }
                for c in self.classes
            ],
            "foci_counts": [{"image": name, "count": n} for name, n in self.foci_counts],
        }


def evaluate(predictions: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence],
             iou_threshold: float = 0.25, num_classes: int = 1, names: Optional[Sequence[str]] = None,
             count_threshold: float = 0.0, settings: Optional[dict] = None) -> EvalReport:
    """Score per-image predictions against per-image ``(BBox, class_id)`` ground truth.

    Matching runs per image in score order; the flags are then merged across
    images by descending score (image order, then detection index, on ties)
    to build each class's PR curve.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truth)} images")
    names = list(names) if names is not None else [str(i) for i in range(len(predictions))]
    ranked = {c: [] for c in range(num_classes)}
    n_gt = {c: 0 for c in range(num_classes)}
    counts = []
    for img, (dets, gts) in enumerate(zip(predictions, ground_truth)):
        for _, cls in gts:
            if cls not in n_gt:
                raise ValueError(f"ground-truth class {cls} outside 0..{num_classes - 1}")
            n_gt[cls] += 1
        ordered = sorted(dets, key=_priority)
        for d, flag in zip(ordered, match_detections(ordered, gts, iou_threshold)):
            if d.class_id not in ranked:
                raise ValueError(f"detection class {d.class_id} outside 0..{num_classes - 1}")
            ranked[d.class_id].append((-d.score, img, d.index, flag))
        counts.append((names[img], count_foci(dets, count_threshold).count))

    classes = []
    total_tp = 0
    for c in range(num_classes):
        flags = [f for *_, f in sorted(ranked[c], key=lambda t: t[:3])]
        total_tp += sum(flags)
        pts = pr_curve(flags, n_gt[c])
        classes.append(ClassReport(c, n_gt[c], ap(flags, n_gt[c]), pts, pts[-1][0] if pts else 0.0))
    total = sum(n_gt.values())
    return EvalReport(
        iou_threshold=iou_threshold,
        classes=classes,
        mAP=map_at([c.ap for c in classes]),
        max_recall=total_tp / total if total else 0.0,
        total_gt=total,
        foci_counts=counts,
        settings=dict(settings or {}),
    )
