"""8-bit grayscale image I/O: binary PGM (P5, maxval 255) and PNG.

PGM is the canonical golden-file format; its writer emits a fixed header so
outputs are byte-stable.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        c = data[i:i + 1]
        if c == b"#":
            i = data.index(b"\n", i) + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    i += 1  # single whitespace byte after maxval
    pixels = data[i:i + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_gray(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit grayscale image (.pgm or .png) as a uint8 array."""
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".png":
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8).copy()
    raise ValueError(f"{path}: unsupported image format {suffix!r}")


def write_gray(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a uint8 grayscale image; format chosen by extension."""
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    if suffix == ".pgm":
        write_pgm(path, img)
    elif suffix == ".png":
        Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="L").save(path)
    else:
        raise ValueError(f"{path}: unsupported image format {suffix!r}")
