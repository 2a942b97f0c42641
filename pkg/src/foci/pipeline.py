"""Glue between a trained detector and the evaluation code."""
from __future__ import annotations

from dataclasses import asdict

from .config import EvalConfig
from .evaluation import EvalReport, count_foci, evaluate, nms
from .formats import Dataset
from .model import Detector


def detect(detector: Detector, images, eval_cfg: EvalConfig, threshold: float = None) -> list:
    """Per-image detections at or above ``threshold`` (default: the counting
    threshold) after per-class NMS, indexed 1..n by descending score."""
    t = eval_cfg.conf_threshold if threshold is None else threshold
    raw = detector.predict(images, t)
    return [count_foci(nms(dets, eval_cfg.nms_threshold), t).detections for dets in raw]


def evaluate_detector(detector: Detector, dataset: Dataset, eval_cfg: EvalConfig,
                      iou_threshold: float = None) -> EvalReport:
    iou_t = eval_cfg.iou_threshold if iou_threshold is None else iou_threshold
    # rank everything above the floor; counts still use the confidence threshold
    preds = detect(detector, dataset.images, eval_cfg, eval_cfg.score_floor)
    settings = asdict(eval_cfg)
    settings["iou_threshold"] = iou_t
    return evaluate(preds, dataset.gts, iou_threshold=iou_t, num_classes=detector.config.num_classes,
                    names=dataset.names, count_threshold=eval_cfg.conf_threshold, settings=settings)
