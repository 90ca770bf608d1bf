"""Readers and writers for the depth/mask file formats used on disk.

Depth frames travel as 16-bit binary PGM (integer millimeters, big-endian
per the PGM spec) or as PFM (float32 millimeters, text header followed by
a binary raster stored bottom-up with a little-endian scale marker).
Masks are 8-bit binary PGM with 0 = outside, 255 = inside.
"""

from __future__ import annotations

import numpy as np

PGM16_MAX = 65535


def _read_pnm_header(f):
    # Header tokens may be separated by arbitrary whitespace and comments.
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise ValueError("truncated PGM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    magic, w, h, maxval = tokens[:4]
    return magic, int(w), int(h), int(maxval)


def write_pgm16(path, depth_mm: np.ndarray) -> None:
    """Write depth in mm as 16-bit PGM, clipping to [0, 65535]."""
    arr = np.clip(np.rint(depth_mm), 0, PGM16_MAX).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{PGM16_MAX}\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5" or maxval != PGM16_MAX:
            raise ValueError(f"{path}: expected 16-bit binary PGM")
        data = f.read(w * h * 2)
    if len(data) != w * h * 2:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_pgm8(path, mask: np.ndarray) -> None:
    """Write a boolean mask as 8-bit PGM (255 inside)."""
    arr = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm8(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5" or maxval != 255:
            raise ValueError(f"{path}: expected 8-bit binary PGM")
        data = f.read(w * h)
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_pfm(path, depth_mm: np.ndarray) -> None:
    """Write float depth in mm as grayscale PFM (rows bottom-up, little-endian)."""
    arr = np.asarray(depth_mm, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tokens = []
        while len(tokens) < 4:
            line = f.readline()
            if not line:
                raise ValueError("truncated PFM header")
            line = line.split(b"#", 1)[0]
            tokens.extend(line.split())
        magic, w, h, scale = tokens[0], int(tokens[1]), int(tokens[2]), float(tokens[3])
        if magic != b"Pf":
            raise ValueError(f"{path}: expected grayscale PFM")
        dtype = "<f4" if scale < 0 else ">f4"
        data = f.read(w * h * 4)
    if len(data) != w * h * 4:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=dtype).reshape(h, w)[::-1].astype(np.float64)


def write_obj(path, vertices_mm: np.ndarray, triangles: np.ndarray) -> None:
    """Write a triangle mesh as Wavefront OBJ (millimeters, y-up)."""
    with open(path, "w") as f:
        f.write("# depthpose mesh export, units mm, y-up\n")
        for v in np.asarray(vertices_mm, dtype=float):
            f.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for t in np.asarray(triangles, dtype=int):
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
