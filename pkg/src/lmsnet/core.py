"""Grid conventions, simplex masks, metrics and the LMT1 / PGM file formats.

Array layout used throughout the package (channel-last, float64):

    ScalarGrid   (H, W)
    FeatureMap   (H, W, C)
    SoftMask     (H, W, 2)   u[..., 0] foreground, u[..., 1] background
    DualField    (H, W, 2)
    BinaryMask   (H, W)      values in {0, 1}
"""
from __future__ import annotations

import os
import struct
from typing import NamedTuple

import numpy as np

SIMPLEX_TOL = 1e-9
TIE_TOL = 1e-12
LMT_MAGIC = b"LMT1"


class GridShape(NamedTuple):
    height: int
    width: int

    @classmethod
    def of(cls, arr) -> "GridShape":
        arr = np.asarray(arr)
        if arr.ndim < 2:
            raise ValueError(f"expected a grid, got array of shape {arr.shape}")
        shape = cls(int(arr.shape[0]), int(arr.shape[1]))
        if shape.height < 1 or shape.width < 1:
            raise ValueError(f"empty grid {shape}")
        return shape


def soft_mask(u1) -> np.ndarray:
    """Stack a foreground probability map into a (H, W, 2) soft mask."""
    u1 = np.asarray(u1, dtype=np.float64)
    return np.stack([u1, 1.0 - u1], axis=-1)


def validate_simplex(u) -> bool:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[-1] != 2:
        return False
    if not np.all(np.isfinite(u)):
        return False
    if np.any(np.abs(u.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        return False
    return bool(np.all(u >= -1e-12))


def _check_simplex(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if not validate_simplex(u):
        raise ValueError("input is not a valid two-class soft mask")
    return u


def entropy_map(u) -> np.ndarray:
    """Per-pixel Shannon entropy of a soft mask, with 0 ln 0 = 0."""
    u = np.clip(_check_simplex(u), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(u > 0.0, u * np.log(u), 0.0)
    return -terms.sum(axis=-1)


def binarize(u) -> np.ndarray:
    """Foreground where u1 > u2; near-ties go to background."""
    u = _check_simplex(u)
    return ((u[..., 0] - u[..., 1]) > TIE_TOL).astype(np.uint8)


def dice(pred, gt) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def downsample_mask(mask, shape) -> np.ndarray:
    """Area-average a binary mask onto a coarser grid, then threshold at 0.5.

    The image size must be an integer multiple of the target size.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = shape
    if mask.shape == (h, w):
        return (mask >= 0.5).astype(np.uint8)
    fh, fw = mask.shape[0] // h, mask.shape[1] // w
    if fh * h != mask.shape[0] or fw * w != mask.shape[1]:
        raise ValueError(f"cannot area-average {mask.shape} onto {shape}")
    avg = mask.reshape(h, fh, w, fw).mean(axis=(1, 3))
    return (avg >= 0.5).astype(np.uint8)


# -- LMT1 tensor files ------------------------------------------------------

def encode_lmt(arr) -> bytes:
    arr = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = LMT_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_lmt(buf: bytes) -> np.ndarray:
    if buf[:4] != LMT_MAGIC:
        raise ValueError("not an LMT1 file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise ValueError(f"LMT1 payload size mismatch: header says {dims}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def write_lmt(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_lmt(arr))


def read_lmt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_lmt(fh.read())


def write_pgm(path, x) -> None:
    """Binary greyscale PGM; values are clamped to [0, 1] and scaled to 0..255."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if x.ndim != 2:
        raise ValueError("PGM output needs a 2-D grid")
    pix = np.round(255.0 * x).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.shape[1]} {x.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("only binary P5 PGM is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(np.float64) / maxval


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
