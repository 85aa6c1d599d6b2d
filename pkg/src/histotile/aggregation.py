"""Majority voting of patch predictions into image labels."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from histotile.dataset import NUM_CLASSES, ClassLabel
from histotile.predictions import PredictionRecord, format_float


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePrediction:
    image_id: str
    label: ClassLabel
    vote_histogram: tuple[int, int, int, int]
    mean_probs: tuple[float, float, float, float]

    @property
    def n_patches(self) -> int:
        return sum(self.vote_histogram)


def decide(votes: Sequence[int], mean_probs: Sequence[float]) -> ClassLabel:
    """Most votes; ties by highest mean probability, then lowest class code."""
    return ClassLabel(max(range(NUM_CLASSES), key=lambda c: (votes[c], mean_probs[c], -c)))


def majority_vote(records: Sequence[PredictionRecord]) -> ImagePrediction:
    if not records:
        raise AggregationError("no patch predictions to aggregate")
    image_id = records[0].image_id
    if any(r.image_id != image_id for r in records):
        raise AggregationError(f"records mix several images: {sorted({r.image_id for r in records})}")
    if any(r.aug != "identity" for r in records):
        raise AggregationError(f"image {image_id!r}: only identity (non-augmented) patches may vote")
    votes = [0] * NUM_CLASSES
    for r in records:
        votes[int(r.label)] += 1
    # summed in a canonical order so the mean does not depend on record order
    ordered = sorted(records, key=lambda r: (r.anchor_y, r.anchor_x, r.probs))
    mean = tuple(float(v) for v in np.mean([r.probs for r in ordered], axis=0))
    return ImagePrediction(image_id, decide(votes, mean), tuple(votes), mean)


def aggregate(records: Iterable[PredictionRecord]) -> list[ImagePrediction]:
    """Vote per image, in order of first appearance."""
    groups: "OrderedDict[str, list[PredictionRecord]]" = OrderedDict()
    for r in records:
        groups.setdefault(r.image_id, []).append(r)
    return [majority_vote(recs) for recs in groups.values()]


IMAGE_CSV_COLUMNS = ("image_id", "pred_label", "n_patches",
                     *(f"votes_{c}" for c in range(NUM_CLASSES)),
                     *(f"mean_p_{c}" for c in range(NUM_CLASSES)))


def write_image_predictions(preds: Iterable[ImagePrediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(IMAGE_CSV_COLUMNS)
        for p in preds:
            writer.writerow([p.image_id, p.label.slug, p.n_patches, *p.vote_histogram,
                             *(format_float(v) for v in p.mean_probs)])


def read_image_predictions(path: str | Path) -> list[ImagePrediction]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != IMAGE_CSV_COLUMNS:
            raise AggregationError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            votes = tuple(int(row[f"votes_{c}"]) for c in range(NUM_CLASSES))
            if sum(votes) != int(row["n_patches"]):
                raise AggregationError(f"{path}: vote counts for {row['image_id']!r} do not sum to n_patches")
            out.append(ImagePrediction(row["image_id"], ClassLabel.parse(row["pred_label"]), votes,
                                       tuple(float(row[f"mean_p_{c}"]) for c in range(NUM_CLASSES))))
    return out
