"""Synthetic foci images with exact ground truth.

Each image is a noisy flat background carrying N blobs. A blob of radius r
is a disk at its peak contrast with a raised-cosine shell of width r/2; its
ground-truth box is the square of side 2r around the centre. Everything is
a pure function of (seed, image index).

Randomness comes from SplitMix64 used in counter mode. The k-th 64-bit
output (k = 0, 1, ...) of the stream for ``(seed, index)`` is::

    key   = mix(mix(seed) ^ (index * 0xD1B54A32D192ED03 mod 2^64))
    out_k = mix(key + (k + 1) * 0x9E3779B97F4A7C15 mod 2^64)

where ``mix`` is the SplitMix64 finaliser. Uniforms take the top 53 bits
(``(out >> 11) * 2^-53``). Normals use Box-Muller on two consecutive
uniforms, keeping only the cosine branch.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .formats import to_unit, write_annotations, write_pgm
from .head import BBox
from .tensor import Tensor

_GAMMA = 0x9E3779B97F4A7C15
_INDEX_MULT = 0xD1B54A32D192ED03
_MASK = (1 << 64) - 1


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-mode SplitMix64 stream keyed by (seed, index)."""

    def __init__(self, seed: int, index: int = 0):
        self.key = _mix_int(_mix_int(seed) ^ ((index * _INDEX_MULT) & _MASK))
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix_array(np.uint64(self.key) + ks * np.uint64(_GAMMA))

    def uniform(self, n: int = 1) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform1(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * float(self.uniform(1)[0])

    def normal(self, n: int = 1) -> np.ndarray:
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]  # in (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1::2])


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    count_min: int = 1
    count_max: int = 4
    radius_min: float = 3.0
    radius_max: float = 6.0
    contrast_min: float = 0.45
    contrast_max: float = 0.85
    background: float = 0.15
    noise_std: float = 0.04
    cluster_probability: float = 0.0
    cluster_spread: float = 2.5  # in units of the parent blob's radius
    min_spacing: float = 14.0  # pixels between centres of independently placed blobs
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError(f"need 0 <= count_min <= count_max, got {self.count_min}, {self.count_max}")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError(f"need 0 < radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if 2 * self.radius_max > self.image_size:
            raise ValueError("blobs of radius_max do not fit in the image")
        if not self.contrast_min <= self.contrast_max:
            raise ValueError("need contrast_min <= contrast_max")
        if self.noise_std < 0 or self.min_spacing < 0 or self.cluster_spread < 0:
            raise ValueError("noise_std, min_spacing and cluster_spread must be >= 0")
        if not 0.0 <= self.cluster_probability <= 1.0:
            raise ValueError("cluster_probability must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Blob:
    x: float  # pixel coordinates, origin at the top-left image corner
    y: float
    radius: float
    contrast: float
    clustered: bool


class PlacementError(RuntimeError):
    pass


def sample_blobs(config: SynthConfig, index: int, rng: SplitMix64 = None) -> list:
    """Blob layout for one image; consumes the start of the image's stream."""
    rng = rng if rng is not None else SplitMix64(config.seed, index)
    span = config.count_max - config.count_min + 1
    n = config.count_min + min(int(rng.uniform1() * span), span - 1)
    size = config.image_size
    blobs: list = []
    for _ in range(n):
        r = rng.uniform1(config.radius_min, config.radius_max)
        c = rng.uniform1(config.contrast_min, config.contrast_max)
        if blobs and rng.uniform1() < config.cluster_probability:
            parent = blobs[min(int(rng.uniform1() * len(blobs)), len(blobs) - 1)]
            dx, dy = rng.normal(2) * config.cluster_spread * parent.radius
            x = min(max(parent.x + dx, r), size - r)
            y = min(max(parent.y + dy, r), size - r)
            blobs.append(Blob(x, y, r, c, True))
            continue
        for _attempt in range(10_000):
            x = rng.uniform1(r, size - r)
            y = rng.uniform1(r, size - r)
            if all(math.hypot(x - b.x, y - b.y) >= config.min_spacing for b in blobs):
                break
        else:
            raise PlacementError(
                f"could not place {n} blobs {config.min_spacing} px apart in a {size} px image")
        blobs.append(Blob(x, y, r, c, False))
    return blobs


def render(config: SynthConfig, blobs: list, rng: SplitMix64) -> np.ndarray:
    """8-bit image: background + Gaussian noise, blobs combined by maximum."""
    size = config.image_size
    centres = np.arange(size) + 0.5
    xx, yy = np.meshgrid(centres, centres)
    signal = np.zeros((size, size))
    for b in blobs:
        dist = np.hypot(xx - b.x, yy - b.y)
        shell = 0.5 * (1.0 + np.cos(np.pi * (dist - b.radius) / (0.5 * b.radius)))
        profile = np.where(dist <= b.radius, 1.0, np.where(dist < 1.5 * b.radius, shell, 0.0))
        signal = np.maximum(signal, b.contrast * profile)
    noise = rng.normal(size * size).reshape(size, size) * config.noise_std
    img = np.clip(config.background + signal + noise, 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8)


def generate_image(config: SynthConfig, index: int):
    """(1x1xHxW float32 image in [0, 1], list of (BBox, class 0)) for image ``index``.

    Pixel values are the 8-bit levels divided by 255, exactly as
    :func:`foci.formats.load_dataset` produces them from disk.
    """
    pixels, gts = generate_pixels(config, index)
    return Tensor(to_unit(pixels)[None, None]), gts


def generate_pixels(config: SynthConfig, index: int):
    rng = SplitMix64(config.seed, index)
    blobs = sample_blobs(config, index, rng)
    pixels = render(config, blobs, rng)
    size = config.image_size
    gts = [(BBox(b.x / size, b.y / size, 2 * b.radius / size, 2 * b.radius / size), 0) for b in blobs]
    return pixels, gts


# ---------------------------------------------------------------------------
# Datasets on disk
# ---------------------------------------------------------------------------

ANNOTATIONS = "annotations.jsonl"
MANIFEST = "manifest.json"


def image_name(index: int) -> str:
    return f"img_{index:05d}.pgm"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(config: SynthConfig, n_images: int, out_dir, start_index: int = 0) -> dict:
    """Write ``n_images`` PGM files, ``annotations.jsonl`` and ``manifest.json``.

    Returns the manifest. I/O failures are re-raised as OSError naming the path.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e.strerror or e}") from e
    records = []
    files = {}
    for i in range(start_index, start_index + n_images):
        pixels, gts = generate_pixels(config, i)
        name = image_name(i)
        write_pgm(out / name, pixels)
        records.append((name, gts))
        files[name] = _sha256(out / name)
    write_annotations(out / ANNOTATIONS, records)
    files[ANNOTATIONS] = _sha256(out / ANNOTATIONS)
    manifest = {
        "format": "foci-synth/1",
        "generator": "splitmix64-counter",
        "seed": config.seed,
        "start_index": start_index,
        "n_images": n_images,
        "config": asdict(config),
        "annotations": ANNOTATIONS,
        "images": [name for name, _ in records],
        "sha256": files,
    }
    path = out / MANIFEST
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return manifest


def regenerate(manifest_path, out_dir) -> dict:
    """Rebuild a dataset from its manifest into ``out_dir``."""
    manifest = json.loads(Path(manifest_path).read_text())
    config = SynthConfig.from_dict(manifest["config"])
    return generate_dataset(config, manifest["n_images"], out_dir, manifest.get("start_index", 0))


def verify(dataset_dir) -> list:
    """Names of files whose digest differs from the manifest."""
    d = Path(dataset_dir)
    manifest = json.loads((d / MANIFEST).read_text())
    return [name for name, digest in manifest["sha256"].items()
            if not (d / name).exists() or _sha256(d / name) != digest]
