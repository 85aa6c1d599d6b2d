"""Reinhard color-statistics stain normalization in the lαβ space.

Images are ``(H, W, 3)`` uint8 RGB arrays. The forward chain is::

    rgb / 255  -> LMS (RGB_TO_LMS)  -> log10(max(LMS, 1/255))  -> lαβ (LMS_TO_LAB)

``RGB_TO_LMS`` is Reinhard's cone-response matrix with every row rescaled
to sum to one, so white maps to LMS = (1, 1, 1) and any gray input has
equal LMS components (α = β = 0). The inverse uses exact matrix inverses,
clamps to [0, 255] and rounds half away from zero.

Standard deviations use the population (divide-by-N) convention and are
floored at ``STD_FLOOR``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_REINHARD_RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
RGB_TO_LMS = _REINHARD_RGB_TO_LMS / _REINHARD_RGB_TO_LMS.sum(axis=1, keepdims=True)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)

LMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LMS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -2.0, 0.0],
]) @ np.diag([np.sqrt(3) / 3, np.sqrt(6) / 6, np.sqrt(2) / 2])

LMS_FLOOR = 1.0 / 255.0
STD_FLOOR = 1e-6


def as_rgb(img) -> np.ndarray:
    """Validate and return an ``(H, W, 3)`` uint8 view of ``img``."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def rgb_to_lab(img) -> np.ndarray:
    rgb = as_rgb(img).astype(np.float64) / 255.0
    lms = rgb @ RGB_TO_LMS.T
    log_lms = np.log10(np.maximum(lms, LMS_FLOOR))
    return log_lms @ LMS_TO_LAB.T


def lab_to_rgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) lαβ image, got shape {lab.shape}")
    if not np.all(np.isfinite(lab)):
        raise ValueError("lαβ image contains non-finite values")
    lms = 10.0 ** (lab @ LAB_TO_LMS.T)
    rgb = np.clip(lms @ LMS_TO_RGB.T * 255.0, 0.0, 255.0)
    # non-negative after the clip, so floor(x + 0.5) rounds half away from zero
    return np.floor(rgb + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class LabStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        std = tuple(max(float(v), STD_FLOOR) for v in self.std)
        if len(mean) != 3 or len(std) != 3:
            raise ValueError("LabStats needs three means and three stds")
        if not all(np.isfinite(mean + std)):
            raise ValueError("LabStats values must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, obj: dict) -> "LabStats":
        return cls(mean=tuple(obj["mean"]), std=tuple(obj["std"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabStats":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def channel_stats(lab) -> LabStats:
    lab = np.asarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3 or lab.shape[0] * lab.shape[1] == 0:
        raise ValueError("channel_stats needs a non-empty (H, W, 3) image")
    flat = lab.reshape(-1, 3)
    return LabStats(mean=tuple(flat.mean(axis=0)), std=tuple(flat.std(axis=0)))


def normalize_stains(source, target: LabStats) -> np.ndarray:
    """Map ``source`` so its lαβ channel means and stds match ``target``."""
    lab = rgb_to_lab(source)
    src = channel_stats(lab)
    scale = np.asarray(target.std) / np.asarray(src.std)
    out = (lab - np.asarray(src.mean)) * scale + np.asarray(target.mean)
    return lab_to_rgb(out)


def target_stats_from_image(img) -> LabStats:
    return channel_stats(rgb_to_lab(img))
