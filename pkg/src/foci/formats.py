"""On-disk formats: binary PGM images, JSON-lines annotations, ``FOCI``
weight files and JSON evaluation reports.

Weight file layout (little-endian)::

    b"FOCI"  u32 version  u32 count
    count x [ u32 name_len, name (UTF-8), u32 rank, rank x u32 extent, float32 values ]
    optional: b"OPTS"  u32 count  count x [ same entry encoding ]

The ``OPTS`` section carries optimizer state in checkpoints.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .head import BBox

MAGIC = b"FOCI"
OPTS_TAG = b"OPTS"
VERSION = 1


class ArchitectureMismatch(ValueError):
    """Weights do not fit the configured network."""


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class UnknownVersionError(WeightFormatError):
    pass


class TruncatedWeightsError(WeightFormatError):
    pass


class PGMFormatError(ValueError):
    pass


class AnnotationError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def _encode_entries(entries: dict) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def encode_weights(params: dict, optimizer: Optional[dict] = None) -> bytes:
    body = MAGIC + struct.pack("<I", VERSION) + _encode_entries(params)
    if optimizer is not None:
        body += OPTS_TAG + _encode_entries(optimizer)
    return body


def save_weights(path, params: dict, optimizer: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_weights(params, optimizer))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedWeightsError(
                f"{self.source}: truncated at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def entries(self) -> dict:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = tuple(struct.unpack(f"<{rank}I", self.take(4 * rank)))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def decode_weights(buf: bytes, source: str = "<bytes>"):
    """(params, optimizer or None). Nothing is returned unless the whole buffer parses."""
    r = _Reader(buf, source)
    if len(buf) < 4:
        raise TruncatedWeightsError(f"{source}: truncated at byte {len(buf)}, needed 4")
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise UnknownVersionError(f"{source}: unknown weight format version {version} (supported: {VERSION})")
    params = r.entries()
    optimizer = None
    if r.pos < len(buf):
        tag = r.take(4)
        if tag != OPTS_TAG:
            raise WeightFormatError(f"{source}: unexpected section tag {tag!r} at byte {r.pos - 4}")
        optimizer = r.entries()
        if r.pos != len(buf):
            raise WeightFormatError(f"{source}: {len(buf) - r.pos} trailing bytes after optimizer state")
    return params, optimizer


def load_weights(path):
    p = Path(path)
    return decode_weights(p.read_bytes(), str(p))


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def to_unit(pixels: np.ndarray) -> np.ndarray:
    """8-bit levels to float32 in [0, 1]."""
    return pixels.astype(np.float32) / np.float32(255.0)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise PGMFormatError(f"expected a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    try:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def read_pgm(path) -> np.ndarray:
    """2-D uint8 array from an 8-bit binary PGM."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMFormatError(f"{path}: not a binary PGM, magic {buf[:2]!r} (expected b'P5')")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMFormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PGMFormatError(f"{path}: malformed header {tokens!r}") from None
    if maxval != 255:
        raise PGMFormatError(f"{path}: maxval {maxval} unsupported (only 255)")
    pos += 1  # single whitespace byte before the raster
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise PGMFormatError(f"{path}: raster truncated ({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def annotation_line(name: str, gts) -> str:
    boxes = [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class": int(c)} for b, c in gts]
    return json.dumps({"image": name, "boxes": boxes})


def write_annotations(path, records) -> None:
    """``records`` is a sequence of (image filename, [(BBox, class), ...])."""
    text = "".join(annotation_line(name, gts) + "\n" for name, gts in records)
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def read_annotations(path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                name = obj["image"]
                if not isinstance(name, str):
                    raise TypeError("image must be a string")
                gts = []
                for b in obj["boxes"]:
                    cls = b["class"]
                    if not isinstance(cls, int) or cls < 0:
                        raise ValueError(f"bad class {cls!r}")
                    gts.append((BBox(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"])), cls))
            except (ValueError, KeyError, TypeError) as e:
                reason = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                raise AnnotationError(path, lineno, reason) from None
            records.append((name, gts))
    return records


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    names: list
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    gts: list

    def __len__(self) -> int:
        return len(self.names)


def load_dataset(directory, annotations: str = "annotations.jsonl") -> Dataset:
    d = Path(directory)
    ann = d / annotations
    if not ann.exists():
        raise FileNotFoundError(f"annotation file not found: {ann}")
    records = read_annotations(ann)
    images = []
    for name, _ in records:
        p = d / name
        if not p.exists():
            raise FileNotFoundError(f"image listed in {ann} not found: {p}")
        images.append(read_pgm(p))
    if images:
        stack = to_unit(np.stack(images)[:, None])
    else:
        stack = np.zeros((0, 1, 1, 1), np.float32)
    return Dataset([n for n, _ in records], stack, [g for _, g in records])


def write_report(path, report) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
