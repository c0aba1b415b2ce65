"""Image files: binary PGM (P5) and a lossless raw float64 grid.

Raw layout (little-endian): the 8-byte magic ``b"VBIMG64\\0"``, ``uint32``
height, ``uint32`` width, then ``height * width`` float64 values row-major.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError

RAW_MAGIC = b"VBIMG64\0"
_HEADER = struct.Struct("<8sII")


def write_raw(path, image):
    image = np.asarray(image, dtype="<f8")
    if image.ndim != 2:
        raise DimensionError(f"raw images are 2-D, got shape {image.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, *image.shape))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_raw(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated raw header")
    magic, h, w = _HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw float64 image")
    body = blob[_HEADER.size:]
    if len(body) != 8 * h * w or h == 0 or w == 0:
        raise ValueError(f"{path}: expected {h}x{w} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def _pgm_tokens(blob, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path):
    blob = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(blob, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise ValueError(f"{path}: invalid PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = h * w * dtype.itemsize
    raster = blob[offset:offset + need]
    if len(raster) != need:
        raise ValueError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64)


def write_pgm(path, image, bits=8, value_range=None):
    """Write ``image`` as P5.

    With ``value_range=None`` values are rounded and clipped to
    ``[0, 2**bits - 1]``; otherwise ``(lo, hi)`` is mapped linearly onto it.
    """
    if bits not in (8, 16):
        raise ValueError("PGM depth must be 8 or 16 bits")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"PGM images are 2-D, got shape {image.shape}")
    maxval = 2**bits - 1
    if value_range is not None:
        lo, hi = value_range
        scale = maxval / (hi - lo) if hi > lo else 0.0
        image = (image - lo) * scale
    pixels = np.clip(np.rint(image), 0, maxval)
    dtype = ">u2" if bits == 16 else "u1"
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.astype(dtype).tobytes())


def write_labels_pgm(path, labels, n_classes):
    """Label map with class ``k`` drawn at gray level ``k * 255 / (K - 1)``."""
    labels = np.asarray(labels)
    step = 255 / max(n_classes - 1, 1)
    write_pgm(path, labels * step, bits=8)


def read_image(path):
    """Read a raw float64 grid or a PGM, chosen by the file's magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == RAW_MAGIC:
        return read_raw(path)
    if head[:2] == b"P5":
        return read_pgm(path)
    raise ValueError(f"{path}: unrecognised image format")
