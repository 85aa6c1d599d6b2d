"""Overlapping patch grids and patch extraction.

Along each axis anchors sit at multiples of the stride. When the last
regular anchor leaves a strip uncovered and ``edge_anchor`` is set, one more
anchor is placed flush with the far edge (``dim - patch_size``). For a
2040 x 1536 image with 512 px patches at 50% overlap this gives x anchors
``0, 256, ..., 1280, 1528`` and y anchors ``0, 256, ..., 1024``: 35 patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from histotile.dataset import ClassLabel


class DimensionTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    patch_size: int = 512
    overlap_fraction: float = 0.5
    edge_anchor: bool = True

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.stride < 1:
            raise ValueError("overlap too large: stride rounds to zero")

    @property
    def stride(self) -> int:
        # round half up
        return math.floor(self.patch_size * (1.0 - self.overlap_fraction) + 0.5)


@dataclass(frozen=True, eq=False)
class Patch:
    source_image_id: str
    anchor: tuple[int, int]
    pixels: np.ndarray
    label: ClassLabel
    augmentation: str = "identity"

    @property
    def name(self) -> str:
        x, y = self.anchor
        return f"{self.source_image_id}_{x}_{y}"

    def with_pixels(self, pixels: np.ndarray, augmentation: str) -> "Patch":
        return replace(self, pixels=pixels, augmentation=augmentation)


def axis_anchors(dim: int, spec: GridSpec) -> list[int]:
    p, s = spec.patch_size, spec.stride
    if dim < p:
        raise DimensionTooSmall(f"dimension {dim} is smaller than patch size {p}")
    anchors = list(range(0, dim - p + 1, s))
    if spec.edge_anchor and (dim - p) % s != 0:
        anchors.append(dim - p)
    return anchors


def compute_grid(width: int, height: int, spec: GridSpec = GridSpec()) -> list[tuple[int, int]]:
    """Top-left ``(x, y)`` anchors in row-major order (y outer, x inner)."""
    if width < spec.patch_size or height < spec.patch_size:
        raise DimensionTooSmall(
            f"image {width}x{height} is smaller than patch size {spec.patch_size}")
    xs = axis_anchors(width, spec)
    ys = axis_anchors(height, spec)
    return [(x, y) for y in ys for x in xs]


def extract_patches(img: np.ndarray, image_id: str, label: ClassLabel,
                    spec: GridSpec = GridSpec()) -> list[Patch]:
    img = np.asarray(img)
    height, width = img.shape[:2]
    label = ClassLabel.parse(label)
    p = spec.patch_size
    return [
        Patch(image_id, (x, y), np.ascontiguousarray(img[y:y + p, x:x + p]), label)
        for x, y in compute_grid(width, height, spec)
    ]
