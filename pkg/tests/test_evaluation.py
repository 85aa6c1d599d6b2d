import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histotile.dataset import ClassLabel
from histotile.evaluation import (EvaluationError, accuracy, auc, one_vs_rest_report, roc_curve,
                                  write_report)


def concordance(scores, positives):
    """Mann-Whitney statistic by exhaustive pairs: P(s+ > s-) + 1/2 P(tie)."""
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    total = Fraction(0)
    for a in pos:
        for b in neg:
            total += 1 if a > b else Fraction(1, 2) if a == b else 0
    return float(total / (len(pos) * len(neg)))


def test_accuracy_on_80_images():
    truth = [0] * 80
    assert accuracy([0] * 78 + [1] * 2, truth) == 0.975
    assert accuracy([0] * 73 + [1] * 7, truth) == 0.9125
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0


def test_accuracy_errors():
    with pytest.raises(EvaluationError):
        accuracy([1], [1, 2])
    with pytest.raises(EvaluationError):
        accuracy([], [])


def test_perfect_separation():
    curve = roc_curve([0.9, 0.8, 0.3, 0.1], [True, True, False, False])
    assert (0.0, 1.0) in curve.points
    assert auc(curve) == 1.0


def test_constant_scores_give_diagonal():
    curve = roc_curve([0.5] * 5, [True, False, True, False, False])
    assert curve.points == [(0.0, 0.0), (1.0, 1.0)]
    assert auc(curve) == 0.5


def test_small_worked_example():
    scores = [0.9, 0.4, 0.5, 0.1]
    pos = [True, True, False, False]
    assert concordance(scores, pos) == 0.75
    assert auc(roc_curve(scores, pos)) == 0.75


def test_curve_shape():
    rng = np.random.default_rng(2)
    scores = rng.integers(0, 5, 40) / 4
    pos = rng.random(40) < 0.4
    curve = roc_curve(scores, pos)
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    assert all(np.diff(curve.fpr) >= 0) and all(np.diff(curve.tpr) >= 0)
    assert list(curve.thresholds[1:]) == sorted(set(scores.tolist()), reverse=True)


def test_auc_equals_concordance_on_200_random_sets():
    rng = np.random.default_rng(20180)
    for trial in range(200):
        n = int(rng.integers(2, 60))
        # coarse grid on half the trials so ties are common
        scores = rng.random(n) if trial % 2 else rng.integers(0, 6, n) / 5
        pos = rng.random(n) < rng.uniform(0.2, 0.8)
        pos[0], pos[1] = True, False
        assert abs(auc(roc_curve(scores, pos)) - concordance(scores.tolist(), pos.tolist())) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10), st.booleans()), min_size=2, max_size=30)
       .filter(lambda xs: any(p for _, p in xs) and not all(p for _, p in xs)))
def test_monotone_transform_invariance(pairs):
    scores = np.array([s for s, _ in pairs], dtype=float)
    pos = [p for _, p in pairs]
    a = roc_curve(scores, pos)
    b = roc_curve(np.exp(scores) * 3 - 1, pos)
    assert a.points == b.points
    assert auc(a) == auc(b)


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    scores, pos = rng.random(30), rng.random(30) < 0.5
    pos[:2] = [True, False]
    perm = rng.permutation(30)
    assert roc_curve(scores, pos).points == roc_curve(scores[perm], pos[perm]).points


def test_single_class_rejected():
    with pytest.raises(EvaluationError):
        roc_curve([0.1, 0.2], [True, True])


def test_one_hot_report():
    truth = [0, 1, 2, 3, 0, 2]
    report = one_vs_rest_report(np.eye(4)[truth], truth)
    for entry in report.values():
        assert entry["auc"] == 1.0 and entry["sensitivity"] == 1.0 and entry["specificity"] == 1.0


TOY_PROBS = np.array([
    [0.70, 0.10, 0.10, 0.10],
    [0.40, 0.35, 0.15, 0.10],
    [0.20, 0.50, 0.20, 0.10],
    [0.30, 0.30, 0.30, 0.10],
    [0.05, 0.15, 0.60, 0.20],
    [0.10, 0.10, 0.45, 0.35],
    [0.10, 0.20, 0.30, 0.40],
    [0.25, 0.05, 0.10, 0.60],
])
TOY_TRUTH = [0, 0, 1, 1, 2, 2, 3, 3]


def test_toy_report_matches_concordance_oracle():
    report = one_vs_rest_report(TOY_PROBS, TOY_TRUTH)
    for c in ClassLabel:
        positives = [t == c for t in TOY_TRUTH]
        assert report[c.slug]["auc"] == pytest.approx(concordance(TOY_PROBS[:, c].tolist(), positives), abs=1e-12)
    # argmax labels are [0, 0, 1, 0, 2, 2, 3, 3]; row 3 ties three ways and goes to normal
    assert report["benign"]["sensitivity"] == 0.5
    assert report["normal"]["specificity"] == pytest.approx(5 / 6)


def test_report_needs_all_classes():
    with pytest.raises(EvaluationError):
        one_vs_rest_report(np.eye(4)[[0, 1, 2]], [0, 1, 2])


def test_write_report(tmp_path):
    report = {"image_accuracy": 1.0, "per_class": one_vs_rest_report(TOY_PROBS, TOY_TRUTH)}
    write_report(report, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data["per_class"]) == {"normal", "benign", "in_situ", "invasive"}
    assert set(data["per_class"]["normal"]) == {"auc", "sensitivity", "specificity"}
    rows = list(csv.reader((tmp_path / "roc_in_situ.csv").open()))
    assert rows[0] == ["fpr", "tpr", "threshold"]
    assert rows[1] == ["0.0", "0.0", "inf"] and rows[-1][:2] == ["1.0", "1.0"]
