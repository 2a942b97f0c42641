"""``foci`` command line: gen, train, infer, eval.

Exit codes: 0 success, 1 bad input (missing or malformed files, mismatched
weights), 2 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path


from .backbone import ConfigError
from .config import default_config, load_config
from .formats import (AnnotationError, ArchitectureMismatch, PGMFormatError, WeightFormatError,
                      load_dataset, load_weights, read_pgm, save_weights, to_unit, write_report)
from .model import build_detector, load_state, state_arrays
from .pipeline import detect, evaluate_detector
from .synth import MANIFEST, PlacementError, generate_dataset
from .train import NonFiniteLoss, train_loop



class CLIError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _config(path):
    return load_config(path) if path else default_config()


def _detector(cfg, weights):
    det = build_detector(cfg.network, seed=cfg.train.seed)
    params, _ = load_weights(weights)
    load_state(det, params)
    return det


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CLIError(f"output directory {out} already exists and is not empty (use --force)")
        shutil.rmtree(out)
    manifest = generate_dataset(synth, args.count, out)
    print(f"wrote {manifest['n_images']} images (seed {synth.seed}); manifest {out / MANIFEST}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    tc = cfg.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    data = load_dataset(args.data)
    det = build_detector(cfg.network, seed=tc.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def report(epoch, loss):
        print(f"epoch {epoch}/{tc.epochs} loss {loss:.6f}", flush=True)

    try:
        result = train_loop(det, data, tc, checkpoint_dir=args.checkpoint_dir,
                            resume=args.resume, on_epoch=report)
    except NonFiniteLoss as e:
        raise CLIError(f"training diverged: {e}", code=2) from None
    save_weights(out, state_arrays(result.detector))
    history = out.with_suffix(".history.json")
    history.write_text(json.dumps({"loss": [float(x) for x in result.history]}, indent=2) + "\n")
    print(f"saved weights to {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args.config)
    ev = cfg.eval if args.conf is None else replace(cfg.eval, conf_threshold=args.conf)
    det = _detector(cfg, args.weights)
    pixels = read_pgm(args.image)
    res = cfg.network.input_resolution
    if pixels.shape != (res, res):
        raise CLIError(f"{args.image}: image is {pixels.shape[1]}x{pixels.shape[0]}, network expects {res}x{res}")
    dets = detect(det, to_unit(pixels)[None, None], ev)[0]
    for d in dets:
        b = d.bbox
        print(f"Cell: {d.score:.4f} {d.index} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}")
    print(f"count {len(dets)}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    det = _detector(cfg, args.weights)
    if args.iou is not None and not 0.0 <= args.iou <= 1.0:
        raise CLIError(f"--iou must lie in [0, 1], got {args.iou}")
    data = load_dataset(args.data)
    report = evaluate_detector(det, data, cfg.eval, iou_threshold=args.iou)
    if args.report:
        write_report(args.report, report)
    m = "n/a" if report.mAP is None else f"{report.mAP:.4f}"
    print(f"mAP@{report.iou_threshold:g} {m} max_recall {report.max_recall:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foci", description="Nuclear foci detection on grayscale microscopy images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect and count foci in one PGM image")
    i.add_argument("--config")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--conf", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a detector on an annotated dataset")
    e.add_argument("--config")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float)
    e.add_argument("--report", help="JSON report path")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"foci: error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, AnnotationError, ArchitectureMismatch, WeightFormatError, PGMFormatError,
            PlacementError, FileNotFoundError, ValueError, OSError) as e:
        print(f"foci: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
