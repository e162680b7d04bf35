"""Image file I/O: 8-bit single-channel PNG read/write, binary PGM (P5) read.

Intensity mapping at the file boundary: byte b <-> b / 255.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage

from .raster import GrayImage


def to_bytes_array(img: GrayImage) -> np.ndarray:
    """Quantize to uint8, clamping intensities into [0, 1] first."""
    return np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(img: GrayImage, path) -> None:
    _PILImage.fromarray(to_bytes_array(img), mode="L").save(str(path), format="PNG")


def png_bytes(img: GrayImage) -> bytes:
    buf = io.BytesIO()
    _PILImage.fromarray(to_bytes_array(img), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> GrayImage:
    with _PILImage.open(str(path)) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return GrayImage(arr / 255.0)


def read_pgm(path) -> GrayImage:
    """Read a binary PGM (P5) with maxval <= 255."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    # Header tokens (magic, width, height, maxval) may be separated by
    # whitespace and '#' comments, followed by a single whitespace byte.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if raster.size != width * height:
        raise ValueError("truncated PGM raster")
    arr = raster.reshape(height, width).astype(np.float64) / 255.0
    return GrayImage(arr)


def read_image(path) -> GrayImage:
    """Dispatch on file magic: PNG or binary PGM."""
    head = Path(path).open("rb").read(2)
    if head == b"P5":
        return read_pgm(path)
    return read_png(path)
