"""Rigid patch augmentation: identity, three rotations and two flips.

Rotations are counter-clockwise in the usual image orientation (row 0 at
the top), so ``[[A, B], [C, D]]`` becomes ``[[B, D], [A, C]]`` under
``rot90``. ``hflip`` mirrors left-right, ``vflip`` mirrors top-bottom.
"""

from __future__ import annotations

import enum
from typing import Iterable

import numpy as np

from histotile.tiling import Patch


class AugTag(str, enum.Enum):
    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    HFLIP = "hflip"
    VFLIP = "vflip"

    def __str__(self) -> str:
        return self.value


AUG_ORDER = tuple(AugTag)

_TRANSFORMS = {
    AugTag.IDENTITY: lambda a: a,
    # same as np.rot90(a, k, axes=(0, 1)) without its per-call overhead
    AugTag.ROT90: lambda a: a[:, ::-1].swapaxes(0, 1),
    AugTag.ROT180: lambda a: a[::-1, ::-1],
    AugTag.ROT270: lambda a: a.swapaxes(0, 1)[:, ::-1],
    AugTag.HFLIP: lambda a: a[:, ::-1],
    AugTag.VFLIP: lambda a: a[::-1, :],
}

_PROBE = np.arange(9).reshape(3, 3)


def transform_pixels(pixels: np.ndarray, tag: AugTag | str) -> np.ndarray:
    return np.ascontiguousarray(_TRANSFORMS[AugTag(tag)](pixels))


def _probe_compose(first: AugTag, then: AugTag) -> AugTag | None:
    grid = transform_pixels(transform_pixels(_PROBE, first), then)
    for tag in AUG_ORDER:
        if np.array_equal(transform_pixels(_PROBE, tag), grid):
            return tag
    return None


_COMPOSE = {(a, b): _probe_compose(a, b) for a in AUG_ORDER for b in AUG_ORDER}


def compose(first: AugTag | str, then: AugTag | str) -> AugTag:
    """Tag equivalent to applying ``first`` and then ``then``.

    Raises ValueError when the composite is a transpose, which is not one of
    the six tags.
    """
    first, then = AugTag(first), AugTag(then)
    tag = _COMPOSE[first, then]
    if tag is None:
        raise ValueError(f"{first} followed by {then} is not one of the six augmentations")
    return tag


def _square(patch: Patch) -> np.ndarray:
    pixels = np.asarray(patch.pixels)
    if pixels.shape[0] != pixels.shape[1]:
        raise ValueError(f"augmentation needs a square patch, got {pixels.shape[:2]}")
    return pixels


def apply(patch: Patch, tag: AugTag | str) -> Patch:
    tag = AugTag(tag)
    new_tag = compose(patch.augmentation, tag)
    return patch.with_pixels(transform_pixels(_square(patch), tag), new_tag.value)


def augment_all(patches: Iterable[Patch]) -> list[Patch]:
    """Six variants per input patch, in input order then ``AUG_ORDER``."""
    out = []
    for p in patches:
        pixels = _square(p)
        current = AugTag(p.augmentation)
        for tag in AUG_ORDER:
            new_tag = compose(current, tag)
            out.append(Patch(p.source_image_id, p.anchor, np.ascontiguousarray(_TRANSFORMS[tag](pixels)),
                             p.label, new_tag.value))
    return out
