"""Codec-free raster serialization: binary PPM, PBM masks, raw depth.

PPM (P6, maxval 255) keeps stored frames bit-exact and diffable. Depth
rasters are little-endian float32 with a small JSON sidecar carrying width,
height, and the image convention.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def ppm_bytes(rgb: np.ndarray) -> bytes:
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 rgb array")
    h, w = rgb.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def ppm_from_bytes(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM")
    # header = magic, width, height, maxval; fields separated by whitespace,
    # comment lines allowed after the magic
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(ppm_bytes(rgb))


def read_ppm(path) -> np.ndarray:
    return ppm_from_bytes(Path(path).read_bytes())


def depth_bytes(depth: np.ndarray) -> bytes:
    return np.ascontiguousarray(depth, dtype="<f4").tobytes()


def depth_from_bytes(data: bytes, width: int, height: int) -> np.ndarray:
    expected = width * height * 4
    if len(data) != expected:
        raise ValueError(f"depth payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(height, width).copy()


def write_depth(path, depth: np.ndarray, convention: str) -> None:
    """Raw float32 raster plus a `.json` sidecar header next to it."""
    p = Path(path)
    p.write_bytes(depth_bytes(depth))
    sidecar = {"width": int(depth.shape[1]), "height": int(depth.shape[0]),
               "convention": convention}
    p.with_suffix(p.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")


def read_depth(path):
    p = Path(path)
    meta = json.loads(p.with_suffix(p.suffix + ".json").read_text())
    depth = depth_from_bytes(p.read_bytes(), meta["width"], meta["height"])
    return depth, meta["convention"]


def pbm_bytes(mask: np.ndarray) -> bytes:
    """P4 bitmap of a boolean mask, for eyeballing segmentation output."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    packed = np.packbits(m, axis=1)
    return b"P4\n%d %d\n" % (w, h) + packed.tobytes()


def write_pbm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(pbm_bytes(mask))
