"""Minimal PGM/PPM codec (P2/P3 ascii, P5/P6 binary, 8-bit)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _read_tokens(raw: bytes, count: int, start: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = start
    n = len(raw)
    while len(tokens) < count and i < n:
        c = raw[i:i + 1]
        if c == b"#":
            while i < n and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            tokens.append(int(raw[i:j]))
            i = j
    if len(tokens) < count:
        raise DataError("truncated netpbm header")
    return tokens, i


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM file into uint8 [H, W] or [H, W, 3]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image format {magic!r}; "
                        "convert frames to PGM/PPM first")
    color = magic in (b"P3", b"P6")
    (width, height, maxval), pos = _read_tokens(raw, 3, 2)
    if maxval <= 0 or maxval > 255:
        raise DataError(f"{path}: only 8-bit images supported (maxval={maxval})")
    count = width * height * (3 if color else 1)
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace after maxval
        data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos)
        if data.size < count:
            raise DataError(f"{path}: truncated pixel data")
    else:
        values, _ = _read_tokens(raw, count, pos)
        data = np.asarray(values, dtype=np.uint8)
    img = data.reshape((height, width, 3) if color else (height, width))
    if maxval != 255:
        img = (img.astype(np.float64) * (255.0 / maxval)).round().astype(np.uint8)
    return img.copy()


def write_image(path, img: np.ndarray) -> None:
    """Write uint8 [H, W] as binary PGM or [H, W, 3] as binary PPM."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DataError(f"netpbm writer needs uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fp:
        fp.write(magic + b"\n%d %d\n255\n" % (w, h))
        fp.write(img.tobytes())
