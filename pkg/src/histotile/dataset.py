"""Class labels, line-oriented JSON manifests and stratified splitting.

Splits are driven by a small portable generator so that the same
``(manifest, ratios, seed)`` produces the same assignment in any language:

* seeding uses SplitMix64::

      z = (x + 0x9E3779B97F4A7C15) mod 2**64
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
      z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
      z = z ^ (z >> 31)

* the stream is xorshift64*::

      x ^= x >> 12;  x ^= x << 25 (mod 2**64);  x ^= x >> 27
      output = x * 0x2545F4914F6CDD1D mod 2**64

* bounded draws ``below(n)`` reject outputs >= ``2**64 - (2**64 mod n)``
  and return ``output mod n``; shuffling is Fisher-Yates from the last
  index down.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

MASK64 = (1 << 64) - 1

SPLITS = ("train", "validation", "test")


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ClassLabel(enum.IntEnum):
    NORMAL = 0
    BENIGN = 1
    IN_SITU = 2
    INVASIVE = 3

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | ClassLabel") -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, int) and not isinstance(value, bool):
            return cls(value)
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                pass
        raise DatasetError(f"unknown label {value!r}")


NUM_CLASSES = len(ClassLabel)


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* generator; see the module docstring for the equations."""

    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def class_seed(seed: int, label: ClassLabel) -> int:
    """Per-class stream seed derived from the split seed and class code."""
    return splitmix64((splitmix64(seed & MASK64) ^ int(label)) & MASK64)


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: ClassLabel
    split: str | None = None
    anchor_x: int | None = None
    anchor_y: int | None = None
    aug: str | None = None

    @property
    def key(self) -> tuple:
        return (self.id, self.anchor_x, self.anchor_y, self.aug)

    def to_json(self) -> dict:
        out = {"id": self.id, "path": self.path, "label": self.label.slug, "split": self.split}
        if self.anchor_x is not None:
            out["anchor_x"] = self.anchor_x
            out["anchor_y"] = self.anchor_y
        if self.aug is not None:
            out["aug"] = self.aug
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        split = obj.get("split")
        if split is not None and split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        anchor_x, anchor_y = obj.get("anchor_x"), obj.get("anchor_y")
        if (anchor_x is None) != (anchor_y is None):
            raise DatasetError("anchor_x and anchor_y must appear together")
        return cls(
            id=str(obj["id"]),
            path=str(obj["path"]),
            label=ClassLabel.parse(obj["label"]),
            split=split,
            anchor_x=None if anchor_x is None else int(anchor_x),
            anchor_y=None if anchor_y is None else int(anchor_y),
            aug=obj.get("aug"),
        )


class Manifest(tuple):
    """Immutable sequence of :class:`ManifestRecord` with unique keys.

    Image manifests key on ``id``; patch manifests reuse the source image
    id and are keyed on ``(id, anchor, aug)``.
    """

    def __new__(cls, records: Iterable[ManifestRecord] = ()):
        records = tuple(records)
        seen = set()
        for rec in records:
            if rec.key in seen:
                raise DatasetError(f"duplicate record {rec.key!r}")
            seen.add(rec.key)
        return super().__new__(cls, records)

    def by_label(self) -> dict[ClassLabel, list[ManifestRecord]]:
        groups: dict[ClassLabel, list[ManifestRecord]] = {c: [] for c in ClassLabel}
        for rec in self:
            groups[rec.label].append(rec)
        return groups

    def histogram(self) -> dict[int, int]:
        return {int(c): len(recs) for c, recs in self.by_label().items()}

    def in_split(self, split: str) -> "Manifest":
        return Manifest(r for r in self if r.split == split)


def save_manifest(manifest: Iterable[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("record is not a JSON object", lineno)
            missing = {"id", "path", "label"} - obj.keys()
            if missing:
                raise ManifestError(f"missing keys {sorted(missing)}", lineno)
            try:
                records.append(ManifestRecord.from_json(obj))
            except (DatasetError, TypeError, ValueError) as exc:
                raise ManifestError(str(exc), lineno) from None
    try:
        return Manifest(records)
    except DatasetError as exc:
        raise ManifestError(str(exc)) from None


def _allocate(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    # Floor allocation; leftovers go to train unless that would push train
    # more than one image past its quota, then to the largest remainder.
    quotas = [r * n for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    for _ in range(n - sum(counts)):
        if counts[0] + 1 - quotas[0] <= 1 + 1e-9:
            counts[0] += 1
            continue
        k = max((1, 2), key=lambda i: (quotas[i] - counts[i], -i))
        counts[k] += 1
    return counts[0], counts[1], counts[2]


@dataclass(frozen=True)
class Split:
    seed: int
    assignment: dict

    def ids(self, split: str) -> list[str]:
        return sorted(i for i, s in self.assignment.items() if s == split)

    def apply(self, manifest: Iterable[ManifestRecord]) -> Manifest:
        """Stamp split names onto records (patch records inherit by image id)."""
        out = []
        for rec in manifest:
            if rec.id not in self.assignment:
                raise DatasetError(f"image {rec.id!r} is not in the split")
            out.append(replace(rec, split=self.assignment[rec.id]))
        return Manifest(out)


def make_split(manifest: Iterable[ManifestRecord],
               ratios: Sequence[float] = (0.6, 0.2, 0.2),
               seed: int = 0) -> Split:
    """Assign each image to train/validation/test, independently per class.

    Within a class the image ids are sorted, shuffled with the class stream
    (``class_seed(seed, label)``), and the shuffled order is cut into
    ``train | validation | test`` blocks.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    manifest = manifest if isinstance(manifest, Manifest) else Manifest(manifest)
    assignment = {}
    for label, recs in manifest.by_label().items():
        if not recs:
            raise DatasetError(f"class {label.slug!r} has no images")
        ids = sorted({r.id for r in recs})
        XorShift64Star(class_seed(seed, label)).shuffle(ids)
        n_train, n_val, _ = _allocate(len(ids), ratios)
        for pos, image_id in enumerate(ids):
            if pos < n_train:
                assignment[image_id] = "train"
            elif pos < n_train + n_val:
                assignment[image_id] = "validation"
            else:
                assignment[image_id] = "test"
    return Split(seed=seed, assignment=assignment)
