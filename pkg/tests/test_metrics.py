import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holivid.metrics import (
    average_precision,
    clustering_accuracy,
    load_predictions,
    map_report,
    overall_map,
    predictions_to_jsonl,
    top1_accuracy,
)
from holivid.taxonomy import CATEGORIES


def brute_force_ap(scores, relevance):
    """Materialize the ranked list and walk it, accumulating precision at every hit."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for k, i in enumerate(ranked, start=1):
        if relevance[i]:
            hits += 1
            total += hits / k
    return total / hits if hits else math.nan


def brute_force_cluster_acc(assign, labels, k):
    n_classes = max(labels) + 1
    size = max(k, n_classes)
    best = 0
    for perm in itertools.permutations(range(size)):
        # cluster c is matched to class perm[c]; padded ids match nothing
        correct = sum(1 for a, y in zip(assign, labels) if a < k and perm[a] == y)
        best = max(best, correct)
    return best / len(labels)


def test_ap_perfect():
    assert average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0


def test_ap_no_positives_is_undefined():
    assert math.isnan(average_precision([0.3, 0.2], [0, 0]))


def test_ap_hand_case():
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_ties_break_by_index():
    # the positive at index 1 ranks after the tied negative at index 0
    assert average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_nan_score_rejected():
    with pytest.raises(ValueError, match="NaN"):
        average_precision([0.1, float("nan")], [1, 0])


@pytest.mark.parametrize("n,p", [(4, 1), (5, 2), (8, 3), (6, 6)])
def test_ap_reversed_ranking_closed_form(n, p):
    rel = [0] * (n - p) + [1] * p
    scores = list(range(n, 0, -1))
    expected = sum(i / (n - p + i) for i in range(1, p + 1)) / p
    assert average_precision(scores, rel) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=1, max_size=12))
def test_ap_matches_oracle_and_monotone_invariance(items):
    scores = np.array([s for s, _ in items], dtype=float)
    rel = np.array([r for _, r in items])
    ap = average_precision(scores, rel)
    ref = brute_force_ap(scores.tolist(), rel.tolist())
    if math.isnan(ref):
        assert math.isnan(ap)
        return
    assert ap == pytest.approx(ref, abs=1e-12)
    assert 0.0 <= ap <= 1.0
    assert average_precision(np.exp(scores) * 3 + 1, rel) == pytest.approx(ap, abs=1e-12)


@pytest.mark.parametrize(
    "cats, overall",
    [
        ((50.6, 28.6, 48.2, 35.9, 29.0, 22.5), 35.8),
        ((55.8, 34.2, 51.8, 38.5, 33.6, 26.1), 40.0),
    ],
)
def test_overall_is_unweighted_category_mean(cats, overall):
    assert overall_map(cats) == pytest.approx(overall, abs=0.05)


def test_overall_skips_undefined_categories():
    assert overall_map([0.5, math.nan, 1.0]) == 0.75


def test_map_report_single_label_perfect():
    rep = map_report(np.array([[0.9], [0.1]]), np.array([[1], [0]]), ["action"])
    assert rep.per_label == [(0, 1.0)]
    assert rep.per_category["action"] == 1.0
    assert rep.overall == 1.0
    assert all(math.isnan(rep.per_category[c]) for c in CATEGORIES if c != "action")


def test_map_report_aggregation():
    cats = ["scene", "scene", "action", "event"]
    scores = np.array([[0.9, 0.1, 0.2, 0.3], [0.1, 0.9, 0.8, 0.4], [0.5, 0.5, 0.1, 0.2]])
    rel = np.array([[1, 0, 0, 0], [0, 1, 1, 0], [0, 1, 0, 0]])
    rep = map_report(scores, rel, cats)
    ap = [brute_force_ap(scores[:, j].tolist(), rel[:, j].tolist()) for j in range(4)]
    assert rep.excluded_labels == [3]
    assert rep.per_category["scene"] == pytest.approx((ap[0] + ap[1]) / 2)
    assert rep.per_category["action"] == pytest.approx(ap[2])
    assert math.isnan(rep.per_category["event"])
    assert rep.overall == pytest.approx(np.mean([rep.per_category["scene"], rep.per_category["action"]]))
    doc = rep.to_dict()
    assert doc["per_category"]["event"] is None
    assert doc["per_label"]["3"] is None


def test_map_report_width_mismatch():
    with pytest.raises(ValueError, match="does not match taxonomy"):
        map_report(np.zeros((2, 3)), np.zeros((2, 3)), ["scene", "scene"])


def test_top1():
    scores = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
    assert top1_accuracy(scores, [1, 0, 1, 0]) == 1.0
    assert top1_accuracy(scores, [1, 0, 1, 1]) == 0.75


def test_top1_ties_pick_lowest_id():
    scores = np.zeros((5, 2))
    assert top1_accuracy(scores, [0, 1, 0, 1, 0]) == pytest.approx(0.6)


def test_clustering_examples():
    assert clustering_accuracy([1, 1, 0, 0], [0, 0, 1, 1], 2) == 1.0
    assert clustering_accuracy([0, 1, 0, 1], [0, 0, 1, 1], 2) == 0.5
    assert clustering_accuracy([0, 0, 0, 0, 0], [2, 2, 1, 0, 2], 1) == pytest.approx(0.6)


def test_clustering_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        clustering_accuracy([0, 1], [0], 2)


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_clustering_matches_enumeration_and_is_permutation_invariant(data):
    k = data.draw(st.integers(1, 4))
    n_classes = data.draw(st.integers(1, 4))
    n = data.draw(st.integers(1, 15))
    assign = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, n_classes - 1), min_size=n, max_size=n))
    acc = clustering_accuracy(assign, labels, k)
    assert acc == pytest.approx(brute_force_cluster_acc(assign, labels, k), abs=1e-12)
    cperm = data.draw(st.permutations(range(k)))
    lperm = data.draw(st.permutations(range(max(labels) + 1)))
    assert clustering_accuracy([cperm[a] for a in assign], [lperm[y] for y in labels], k) == pytest.approx(acc)


def test_predictions_roundtrip(tmp_path):
    p = tmp_path / "p.jsonl"
    p.write_text(predictions_to_jsonl(["a", "b"], np.array([[0.5, -1.0], [2.0, 0.0]])))
    ids, scores = load_predictions(p)
    assert ids == ["a", "b"]
    np.testing.assert_array_equal(scores, [[0.5, -1.0], [2.0, 0.0]])


def test_predictions_ragged(tmp_path):
    p = tmp_path / "p.jsonl"
    p.write_text('{"video_id": "a", "scores": [1, 2]}\n{"video_id": "b", "scores": [1]}\n')
    with pytest.raises(ValueError, match="expected 2 scores"):
        load_predictions(p)
