"""Lossless image file I/O and resampling."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(img: np.ndarray, path: str | Path) -> None:
    # PNG only; no timestamps or other metadata so reruns are byte-identical
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="RGB").save(
        path, format="PNG", optimize=False, compress_level=6)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of a uint8 RGB image to ``size`` x ``size``."""
    if img.shape[0] == size and img.shape[1] == size:
        return img
    im = Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="RGB")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.uint8)
