"""Accuracy, one-vs-rest ROC curves, AUC, sensitivity and specificity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from histotile.aggregation import ImagePrediction
from histotile.dataset import NUM_CLASSES, ClassLabel
from histotile.predictions import PredictionRecord, argmax_label


class EvaluationError(ValueError):
    pass


def accuracy(predicted: Sequence, truth: Sequence) -> float:
    if len(predicted) != len(truth):
        raise EvaluationError(f"length mismatch: {len(predicted)} predictions, {len(truth)} labels")
    if not truth:
        raise EvaluationError("accuracy of an empty set is undefined")
    correct = sum(int(p) == int(t) for p, t in zip(predicted, truth))
    return correct / len(truth)


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0, 0) to (1, 1).

    ``thresholds[i]`` is the score cut-off for point ``i`` (predict positive
    when score >= threshold); the first point uses ``inf``. ``tp``/``fp``
    keep the raw counts so the area can be computed exactly.
    """

    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]
    tp: tuple[int, ...]
    fp: tuple[int, ...]

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


def roc_curve(scores: Sequence[float], positives: Sequence[bool]) -> RocCurve:
    """Sweep thresholds over the distinct scores, highest first.

    All samples sharing a score enter in one step, so tied positives and
    negatives produce a diagonal segment.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise EvaluationError("scores and positives must be 1-d and equally long")
    n_pos = int(positives.sum())
    n_neg = int(len(positives) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positives[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tp_all = (0, *map(int, tp))
    fp_all = (0, *map(int, fp))
    return RocCurve(
        fpr=tuple(f / n_neg for f in fp_all),
        tpr=tuple(t / n_pos for t in tp_all),
        thresholds=(float("inf"), *map(float, s[ends])),
        tp=tp_all,
        fp=fp_all,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve.

    Accumulated on integer counts and divided once, which makes it equal to
    the Mann-Whitney statistic (ties counted one half) up to a single
    rounding.
    """
    n_pos, n_neg = curve.tp[-1], curve.fp[-1]
    if n_pos and n_neg:
        twice = sum((curve.fp[i] - curve.fp[i - 1]) * (curve.tp[i] + curve.tp[i - 1])
                    for i in range(1, len(curve.tp)))
        return float(Fraction(twice, 2 * n_pos * n_neg))
    area = 0.0
    for i in range(1, len(curve.fpr)):
        area += (curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2
    return area


def one_vs_rest_report(scores, truth: Sequence, predicted: Sequence | None = None) -> dict:
    """Per-class ROC, AUC and argmax-rule sensitivity/specificity.

    ``scores`` is an ``(n, 4)`` matrix of class probabilities. ``predicted``
    defaults to the argmax of each row (ties to the lowest class code); pass
    the majority-vote labels for image-level reports.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.array([int(t) for t in truth])
    if scores.shape != (len(truth), NUM_CLASSES):
        raise EvaluationError(f"scores must have shape ({len(truth)}, {NUM_CLASSES}), got {scores.shape}")
    missing = [ClassLabel(c).slug for c in range(NUM_CLASSES) if not np.any(truth == c)]
    if missing:
        raise EvaluationError(f"classes missing from ground truth: {missing}")
    if predicted is None:
        predicted = [argmax_label(row) for row in scores]
    predicted = np.array([int(p) for p in predicted])
    if len(predicted) != len(truth):
        raise EvaluationError("predicted and truth differ in length")
    report = {}
    for c in ClassLabel:
        pos = truth == c
        curve = roc_curve(scores[:, c], pos)
        hit = predicted == c
        report[c.slug] = {
            "roc": curve,
            "auc": auc(curve),
            "sensitivity": float(np.sum(hit & pos) / np.sum(pos)),
            "specificity": float(np.sum(~hit & ~pos) / np.sum(~pos)),
        }
    return report


def build_report(patch_records: Sequence[PredictionRecord],
                 image_preds: Sequence[ImagePrediction],
                 truth: Mapping[str, ClassLabel]) -> dict:
    """Patch- and image-level accuracy plus image-level one-vs-rest ROC.

    Image scores are the mean patch probabilities from the vote. Patch
    truth is the label of the patch's source image.
    """
    unknown = sorted({r.image_id for r in patch_records} - truth.keys())
    if unknown:
        raise EvaluationError(f"predictions for images without ground truth: {unknown[:5]}")
    report = {
        "n_patches": len(patch_records),
        "n_images": len(image_preds),
    }
    if patch_records:
        report["patch_accuracy"] = accuracy([r.label for r in patch_records],
                                            [truth[r.image_id] for r in patch_records])
    if image_preds:
        image_truth = [truth[p.image_id] for p in image_preds]
        report["image_accuracy"] = accuracy([p.label for p in image_preds], image_truth)
        per_class = one_vs_rest_report([p.mean_probs for p in image_preds], image_truth,
                                       [p.label for p in image_preds])
        report["per_class"] = per_class
    return report


def write_report(report: dict, out_dir: str | Path) -> None:
    """``report.json`` plus ``roc_<class>.csv`` (fpr, tpr, threshold) per class."""
    out_dir = Path(out_dir)
    serial = {k: v for k, v in report.items() if k != "per_class"}
    if "per_class" in report:
        serial["per_class"] = {
            name: {k: v for k, v in entry.items() if k != "roc"}
            for name, entry in report["per_class"].items()
        }
        for name, entry in report["per_class"].items():
            curve = entry["roc"]
            with open(out_dir / f"roc_{name}.csv", "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(("fpr", "tpr", "threshold"))
                for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
                    writer.writerow((repr(f), repr(t), repr(th)))
    (out_dir / "report.json").write_text(json.dumps(serial, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
