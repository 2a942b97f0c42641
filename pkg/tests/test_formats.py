import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foci.formats import (
    AnnotationError,
    BadMagicError,
    PGMFormatError,
    TruncatedWeightsError,
    UnknownVersionError,
    WeightFormatError,
    decode_weights,
    encode_weights,
    load_dataset,
    load_weights,
    read_annotations,
    read_pgm,
    save_weights,
    write_annotations,
    write_pgm,
)
from foci.head import BBox


def sample_params(rng):
    return {
        "a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "a.bias": rng.standard_normal(3).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
        "ü.name": rng.standard_normal((1, 4)).astype(np.float32),
    }


def test_weights_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = sample_params(rng)
    opts = {"adam.step": np.float32(3), "adam.m.a.bias": rng.standard_normal(3).astype(np.float32)}
    save_weights(tmp_path / "w", params, opts)
    p2, o2 = load_weights(tmp_path / "w")
    assert list(p2) == list(params)
    for k in params:
        assert p2[k].dtype == np.float32 and p2[k].tobytes() == np.asarray(params[k]).tobytes()
        assert p2[k].shape == np.shape(params[k])
    assert set(o2) == set(opts)
    save_weights(tmp_path / "w2", p2, o2)
    assert (tmp_path / "w").read_bytes() == (tmp_path / "w2").read_bytes()


def test_weights_without_optimizer_section():
    buf = encode_weights(sample_params(np.random.default_rng(1)))
    params, opts = decode_weights(buf)
    assert opts is None and len(params) == 4


def test_weights_layout_is_little_endian():
    buf = encode_weights({"w": np.array([1.0, -2.0], np.float32)})
    assert buf[:4] == b"FOCI"
    assert struct.unpack("<III", buf[4:16]) == (1, 1, 1)
    assert buf[16:17] == b"w"
    assert struct.unpack("<II", buf[17:25]) == (1, 2)
    assert np.frombuffer(buf[25:], "<f4").tolist() == [1.0, -2.0]


def test_bad_magic():
    buf = encode_weights({"w": np.zeros(2, np.float32)})
    with pytest.raises(BadMagicError, match="magic"):
        decode_weights(b"FOCX" + buf[4:])


def test_unknown_version_loads_nothing():
    buf = bytearray(encode_weights({"w": np.zeros(2, np.float32)}))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnknownVersionError, match="version 2"):
        decode_weights(bytes(buf))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_every_truncation_is_reported(data):
    rng = np.random.default_rng(2)
    buf = encode_weights(sample_params(rng), {"m": np.ones(3, np.float32)})
    cut = data.draw(st.integers(0, len(buf) - 1))
    with pytest.raises(TruncatedWeightsError):
        decode_weights(buf[:cut])


def test_weight_errors_are_distinct():
    assert len({BadMagicError, UnknownVersionError, TruncatedWeightsError}) == 3
    for cls in (BadMagicError, UnknownVersionError, TruncatedWeightsError):
        assert issubclass(cls, WeightFormatError)


def test_trailing_garbage_rejected():
    buf = encode_weights({"w": np.zeros(2, np.float32)})
    with pytest.raises(WeightFormatError):
        decode_weights(buf + b"JUNK")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_pgm_round_trip(w, h, seed):
    pixels = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.pgm"
        write_pgm(path, pixels)
        back = read_pgm(path)
        assert back.dtype == np.uint8 and np.array_equal(back, pixels)
        write_pgm(Path(d) / "y.pgm", back)
        assert path.read_bytes() == (Path(d) / "y.pgm").read_bytes()


def test_pgm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[7, 255]]


@pytest.mark.parametrize("payload,match", [
    (b"P2\n1 1\n255\n0", "not a binary PGM"),
    (b"P6\n1 1\n255\n\x00\x00\x00", "not a binary PGM"),
    (b"P5\n2 2\n255\n\x00", "truncated"),
    (b"P5\n2 2\n65535\n" + b"\x00" * 8, "maxval"),
    (b"P5\nx 2\n255\n\x00\x00", "malformed"),
])
def test_pgm_rejects_bad_files(tmp_path, payload, match):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(PGMFormatError, match=match):
        read_pgm(tmp_path / "bad.pgm")


def test_pgm_writer_rejects_non_uint8(tmp_path):
    with pytest.raises(PGMFormatError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), np.float32))


def test_annotations_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    records = [
        (f"img_{i}.pgm", [(BBox(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.01, 0.3, 2)), int(rng.integers(0, 3)))
                          for _ in range(int(rng.integers(0, 4)))])
        for i in range(20)
    ]
    write_annotations(tmp_path / "a.jsonl", records)
    back = read_annotations(tmp_path / "a.jsonl")
    assert back == records
    write_annotations(tmp_path / "b.jsonl", back)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


@pytest.mark.parametrize("line", [
    "{not json",
    '{"boxes": []}',
    '{"image": "x.pgm", "boxes": [{"cx": 0.5, "cy": 0.5, "w": 0.1, "class": 0}]}',
    '{"image": "x.pgm", "boxes": [{"cx": 0.5, "cy": 0.5, "w": -0.1, "h": 0.1, "class": 0}]}',
    '{"image": "x.pgm", "boxes": [{"cx": 0.5, "cy": 0.5, "w": 0.1, "h": 0.1, "class": "cell"}]}',
])
def test_corrupt_annotation_names_line(tmp_path, line):
    good = '{"image": "a.pgm", "boxes": []}'
    (tmp_path / "a.jsonl").write_text(f"{good}\n{good}\n{line}\n")
    with pytest.raises(AnnotationError, match=r":3:") as info:
        read_annotations(tmp_path / "a.jsonl")
    assert info.value.line == 3


def test_dataset_reports_missing_image(tmp_path):
    write_annotations(tmp_path / "annotations.jsonl", [("gone.pgm", [])])
    with pytest.raises(FileNotFoundError, match="gone.pgm"):
        load_dataset(tmp_path)
