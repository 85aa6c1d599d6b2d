"""Synthetic stand-ins for H&E images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from histotile.dataset import ClassLabel
from histotile.images import write_image

# per-class fraction of "nucleus" pixels; survives per-image stain normalization
# because the two-colour mixture proportion changes the standardized values
NUCLEUS_FRACTION = {ClassLabel.NORMAL: 0.1, ClassLabel.BENIGN: 0.35,
                    ClassLabel.IN_SITU: 0.65, ClassLabel.INVASIVE: 0.9}
HEMATOXYLIN = np.array([90, 50, 150])
EOSIN = np.array([235, 140, 190])


def he_like_image(label: ClassLabel, size: int, rng: np.random.Generator,
                  stain_shift=(0, 0, 0)) -> np.ndarray:
    # 4x4-pixel nuclei so the mixture survives downscaling
    cells = rng.random((size // 4, size // 4)) < NUCLEUS_FRACTION[label]
    nuclei = np.kron(cells, np.ones((4, 4), dtype=bool))
    img = np.where(nuclei[..., None], HEMATOXYLIN, EOSIN).astype(np.float64)
    img += rng.normal(0, 6, img.shape) + np.asarray(stain_shift, dtype=np.float64)
    return np.clip(np.rint(img), 1, 255).astype(np.uint8)


def write_fixture(root: Path, per_class: int = 4, size: int = 128, seed: int = 7) -> Path:
    """Class-folder dataset plus a reference image for the normalization target."""
    rng = np.random.default_rng(seed)
    data = root / "images"
    for label in ClassLabel:
        d = data / label.slug
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            shift = rng.integers(-20, 21, size=3)
            write_image(he_like_image(label, size, rng, shift), d / f"{label.slug}_{i:02d}.png")
    ref = np.concatenate([he_like_image(c, size // 2, rng) for c in ClassLabel], axis=0)
    write_image(ref, root / "reference.png")
    return data
