"""Per-patch prediction records and their CSV form.

The CSV is also the ingestion path for predictions made elsewhere (for
example by a pretrained network), so evaluation can run without this
package's trainer. Columns::

    image_id, anchor_x, anchor_y, aug, p_normal, p_benign, p_insitu, p_invasive, pred_label
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from histotile.dataset import NUM_CLASSES, ClassLabel

PROB_COLUMNS = ("p_normal", "p_benign", "p_insitu", "p_invasive")
CSV_COLUMNS = ("image_id", "anchor_x", "anchor_y", "aug", *PROB_COLUMNS, "pred_label")

# tolerance for externally written probabilities, which are often rounded
INGEST_SUM_TOL = 1e-3


class PredictionFormatError(ValueError):
    pass


def argmax_label(probs: Sequence[float]) -> ClassLabel:
    """Most probable class; ties go to the lowest class code."""
    best = 0
    for k in range(1, len(probs)):
        if probs[k] > probs[best]:
            best = k
    return ClassLabel(best)


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    anchor_x: int
    anchor_y: int
    aug: str
    probs: tuple[float, float, float, float]
    label: ClassLabel

    @classmethod
    def from_probs(cls, image_id: str, anchor: tuple[int, int], aug: str,
                   probs: Sequence[float]) -> "PredictionRecord":
        probs = tuple(float(p) for p in probs)
        return cls(image_id, int(anchor[0]), int(anchor[1]), str(aug), probs, argmax_label(probs))


def format_float(x: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(x))


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.image_id, r.anchor_x, r.anchor_y, r.aug,
                             *(format_float(p) for p in r.probs), r.label.slug])


def read_predictions(path: str | Path, *, renormalize: bool = False) -> list[PredictionRecord]:
    """Parse a prediction CSV.

    With ``renormalize`` (used for external files) probability rows that sum
    to 1 within ``INGEST_SUM_TOL`` are rescaled to sum to exactly 1;
    otherwise rows must sum to 1 within 1e-6.
    """
    tol = INGEST_SUM_TOL if renormalize else 1e-6
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise PredictionFormatError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise PredictionFormatError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                anchor_x, anchor_y = int(row[1]), int(row[2])
                probs = [float(v) for v in row[4:4 + NUM_CLASSES]]
                label = ClassLabel.parse(row[-1])
            except ValueError as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from None
            if any(not math.isfinite(p) or p < 0 for p in probs):
                raise PredictionFormatError(f"{path}:{lineno}: probabilities must be finite and non-negative")
            total = math.fsum(probs)
            if abs(total - 1.0) > tol:
                raise PredictionFormatError(f"{path}:{lineno}: probabilities sum to {total}, not 1")
            if renormalize:
                probs = [p / total for p in probs]
            records.append(PredictionRecord(row[0], anchor_x, anchor_y, row[3].strip() or "identity",
                                            tuple(probs), label))
    return records


def prob_matrix(records: Sequence[PredictionRecord]) -> np.ndarray:
    return np.array([r.probs for r in records], dtype=np.float64).reshape(-1, NUM_CLASSES)
