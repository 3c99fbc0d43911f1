"""Binary PPM (P6) and PGM (P5) encode/decode, no image libraries involved.

8-bit samples throughout for writes; reads also accept 16-bit PGMs, which
the format stores big-endian.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    """Malformed or unsupported PNM data."""


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise PnmError(f"PPM writer needs (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 1) uint8 array as binary PGM."""
    arr = np.asarray(gray)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise PnmError(f"PGM writer needs (H, W) uint8, got {arr.shape} {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    if data[:2] not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported image magic {data[:2]!r}")
    magic = data[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # header comment runs to end of line
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    return magic, w, h, maxval, pos


def read_pnm(path) -> np.ndarray:
    """Decode P5 -> (H, W) and P6 -> (H, W, 3); uint8 or uint16 per maxval."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, pos = _read_header(data, path)
    channels = 3 if magic == b"P6" else 1
    if maxval < 256:
        dtype, itemsize = np.uint8, 1
    elif maxval < 65536:
        dtype, itemsize = np.dtype(">u2"), 2  # 16-bit samples are big-endian
    else:
        raise PnmError(f"{path}: maxval {maxval} out of range")
    need = w * h * channels * itemsize
    body = data[pos:pos + need]
    if len(body) != need:
        raise PnmError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).astype(np.uint16 if itemsize == 2 else np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def read_ppm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise PnmError(f"{path}: expected a P6 color image")
    return arr


def read_pgm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise PnmError(f"{path}: expected a P5 grayscale image")
    return arr
