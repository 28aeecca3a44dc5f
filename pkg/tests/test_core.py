import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lmsnet.core import (GridShape, binarize, decode_lmt, dice, downsample_mask, encode_lmt, entropy_map,
                         read_lmt, read_pgm, soft_mask, validate_simplex, write_lmt, write_pgm)


def const_mask(u1, shape=(3, 4)):
    return soft_mask(np.full(shape, u1))


def test_gridshape():
    assert GridShape.of(np.zeros((3, 5, 2))) == (3, 5)
    with pytest.raises(ValueError):
        GridShape.of(np.zeros(4))
    with pytest.raises(ValueError):
        GridShape.of(np.zeros((0, 3)))


def test_validate_simplex_examples():
    assert validate_simplex(const_mask(0.5))
    assert validate_simplex(const_mask(1.0))
    u = const_mask(0.4)
    u[1, 2] = (0.6, 0.6)
    assert not validate_simplex(u)
    assert not validate_simplex(np.zeros((3, 3)))
    u = const_mask(0.5)
    u[0, 0, 0] = np.nan
    assert not validate_simplex(u)


def test_entropy_examples():
    assert entropy_map(const_mask(0.5))[0, 0] == pytest.approx(math.log(2), abs=1e-12)
    assert entropy_map(const_mask(1.0))[0, 0] == 0.0
    assert entropy_map(const_mask(0.9))[0, 0] == pytest.approx(0.325083, abs=1e-6)


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
def test_entropy_swap_invariant_and_bounded(u1):
    u = soft_mask(u1)
    e = entropy_map(u)
    assert np.array_equal(e, entropy_map(u[..., ::-1]))
    assert np.all(e >= 0) and np.all(e <= math.log(2) + 1e-15)


def test_binarize_examples():
    u = np.array([[[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]]])
    assert binarize(u).tolist() == [[1, 0, 0]]
    assert binarize(u).dtype == np.uint8


@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(0.01, 0.99)), st.floats(0.1, 5.0))
def test_binarize_invariant_under_monotone_rescaling(u1, p):
    u = soft_mask(u1)
    w = u ** p
    w = w / w.sum(-1, keepdims=True)
    # ties can shift by rounding; restrict to pixels clearly away from 0.5
    clear = np.abs(u1 - 0.5) > 1e-6
    assert np.array_equal(binarize(u)[clear], binarize(w)[clear])


def test_dice_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0, :2] = 1
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[3, :2] = 1
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, 1:3] = 1
    assert dice(a, c) == 0.5
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@given(hnp.arrays(np.uint8, (5, 5), elements=st.integers(0, 1)),
       hnp.arrays(np.uint8, (5, 5), elements=st.integers(0, 1)))
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_downsample_mask():
    m = np.zeros((8, 8))
    m[:4, :4] = 1
    m[4, 4] = 1  # 1/16 of a 4x4 block: below threshold
    out = downsample_mask(m, (2, 2))
    assert out.tolist() == [[1, 0], [0, 0]]
    half = np.zeros((4, 4))
    half[:2, :] = 1
    assert downsample_mask(half, (1, 1)).tolist() == [[1]]  # exactly 0.5 counts as foreground
    with pytest.raises(ValueError):
        downsample_mask(np.zeros((6, 6)), (4, 4))


def test_lmt_layout_is_bit_exact():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    buf = encode_lmt(arr)
    assert buf[:4] == b"LMT1"
    assert struct.unpack("<III", buf[4:16]) == (2, 2, 3)
    assert buf[16:] == struct.pack("<6d", *range(6))


@settings(max_examples=50)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_lmt_roundtrip(arr):
    out = decode_lmt(encode_lmt(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes() or arr.size == 0


def test_lmt_errors(tmp_path):
    with pytest.raises(ValueError, match="magic"):
        decode_lmt(b"XXXX" + bytes(8))
    buf = encode_lmt(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="size"):
        decode_lmt(buf[:-8])
    p = tmp_path / "a.lmt"
    write_lmt(p, np.eye(3))
    assert np.array_equal(read_lmt(p), np.eye(3))


def test_pgm_roundtrip(tmp_path):
    x = np.array([[0.0, 0.5, 1.0], [-1.0, 2.0, 0.25]])
    p = tmp_path / "x.pgm"
    write_pgm(p, x)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert list(raw[-6:]) == [0, 128, 255, 0, 255, 64]
    assert np.allclose(read_pgm(p), np.round(255 * np.clip(x, 0, 1)) / 255)
