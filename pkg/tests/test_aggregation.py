import random
from collections import Counter

import numpy as np
import pytest

from histotile.aggregation import (AggregationError, aggregate, majority_vote, read_image_predictions,
                                   write_image_predictions)
from histotile.dataset import ClassLabel
from histotile.predictions import PredictionRecord


def record(label, probs=None, image="img", anchor=(0, 0), aug="identity"):
    if probs is None:
        probs = [0.1] * 4
        probs[label] = 0.7
    return PredictionRecord(image, anchor[0], anchor[1], aug, tuple(probs), ClassLabel(label))


def brute_force_label(records):
    """Independent recount: sort candidate classes by (-votes, -mean prob, code)."""
    votes = Counter(int(r.label) for r in records)
    means = [sum(r.probs[c] for r in records) / len(records) for c in range(4)]
    top = max(votes.values())
    tied = [c for c in range(4) if votes.get(c, 0) == top]
    best_mean = max(means[c] for c in tied)
    return min(c for c in tied if means[c] >= best_mean - 1e-12)


def records_from_votes(votes, rng, favour=None):
    recs = []
    for label, n in enumerate(votes):
        for _ in range(n):
            probs = rng.dirichlet(np.ones(4))
            probs[label] += 1.0
            if favour is not None:
                probs[favour] += 0.5
            probs /= probs.sum()
            label_of = int(np.argmax(probs))
            recs.append(PredictionRecord("img", len(recs), 0, "identity", tuple(probs), ClassLabel(label_of)))
    return recs


def test_clear_majority_of_35():
    recs = [record(3, anchor=(i, 0)) for i in range(20)] + [record(i % 3, anchor=(i, 1)) for i in range(15)]
    pred = majority_vote(recs)
    assert pred.label is ClassLabel.INVASIVE
    assert pred.n_patches == 35 and pred.vote_histogram[3] == 20


def test_single_patch():
    assert majority_vote([record(2)]).label is ClassLabel.IN_SITU


def test_two_way_tie_broken_by_mean_probability():
    rng = np.random.default_rng(0)
    recs = records_from_votes([10, 10, 8, 7], rng, favour=1)
    pred = majority_vote(recs)
    assert pred.vote_histogram == (10, 10, 8, 7)
    assert pred.mean_probs[1] > pred.mean_probs[0]
    assert pred.label is ClassLabel.BENIGN
    assert int(pred.label) == brute_force_label(recs)


def test_full_tie_falls_back_to_lowest_code():
    recs = [record(c, probs=[0.25] * 4, anchor=(c, 0)) for c in (3, 1, 2, 0)]
    assert majority_vote(recs).label is ClassLabel.NORMAL


@pytest.mark.parametrize("votes", [(10, 10, 8, 7), (5, 5, 5, 1), (3, 0, 3, 3), (4, 4, 4, 4), (0, 6, 6, 2),
                                   (1, 0, 0, 0), (7, 2, 9, 9)])
def test_permutation_and_recount_oracle(votes):
    rng = np.random.default_rng(sum(votes))
    recs = records_from_votes(votes, rng)
    expected = brute_force_label(recs)
    first = majority_vote(recs)
    assert int(first.label) == expected
    shuffler = random.Random(1234)
    for _ in range(100):
        perm = recs[:]
        shuffler.shuffle(perm)
        pred = majority_vote(perm)
        assert pred == first


def test_strict_majority_ignores_probabilities():
    # benign holds a strict majority even though normal has far larger mean probability
    recs = [record(1, [0.3, 0.31, 0.2, 0.19], anchor=(i, 0)) for i in range(6)]
    recs += [record(0, [0.99, 0.0, 0.01, 0.0], anchor=(i, 1)) for i in range(5)]
    pred = majority_vote(recs)
    assert pred.mean_probs[0] > pred.mean_probs[1]
    assert pred.label is ClassLabel.BENIGN


def test_errors():
    with pytest.raises(AggregationError):
        majority_vote([])
    with pytest.raises(AggregationError):
        majority_vote([record(0), record(1, image="other")])
    with pytest.raises(AggregationError):
        majority_vote([record(0, aug="rot90")])


def test_aggregate_groups_and_csv_round_trip(tmp_path):
    recs = [record(0, image="a"), record(2, image="b"), record(0, image="a", anchor=(1, 0))]
    preds = aggregate(recs)
    assert [p.image_id for p in preds] == ["a", "b"]
    assert preds[0].vote_histogram == (2, 0, 0, 0)
    write_image_predictions(preds, tmp_path / "img.csv")
    header = (tmp_path / "img.csv").read_text().splitlines()[0]
    assert header == ("image_id,pred_label,n_patches,votes_0,votes_1,votes_2,votes_3,"
                      "mean_p_0,mean_p_1,mean_p_2,mean_p_3")
    assert read_image_predictions(tmp_path / "img.csv") == preds
