"""Evaluation metrics against brute-force oracles."""

import itertools

import numpy as np
import pytest

from hubnet.metrics import accuracy, alignment, average_precision, mean_average_precision
from hubnet.rng import Rng


def brute_force_ap(scores, labels):
    """Oracle: walk distinct thresholds explicitly and integrate the PR curve."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n_pos = labels.sum()
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for th in thresholds:
        mask = scores >= th
        tp = float(labels[mask].sum())
        precision = tp / float(mask.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_labels_as_scores_give_one(self):
        labels = [1, 0, 1, 0, 0, 1]
        assert average_precision(labels, labels) == 1.0

    def test_constant_scores_equal_prevalence(self):
        labels = [1, 0, 0, 1, 0]
        got = average_precision([0.5] * 5, labels)
        assert got == pytest.approx(2 / 5, abs=1e-12)

    def test_worst_ranking(self):
        got = average_precision([0.1, 0.9], [1, 0])
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_requires_a_positive(self):
        with pytest.raises(ValueError):
            average_precision([0.5, 0.4], [0, 0])

    def test_matches_brute_force_on_all_labelings(self):
        rng = Rng(0)
        for n in range(1, 9):
            score_sets = [
                [round(rng.uniform(), 3) for _ in range(n)],  # generic
                [0.5] * n,  # fully tied
                [round(rng.uniform() * 2) / 2 for _ in range(n)],  # heavy ties
            ]
            for labels in itertools.product([0, 1], repeat=n):
                if sum(labels) == 0:
                    continue
                for scores in score_sets:
                    got = average_precision(scores, list(labels))
                    want = brute_force_ap(scores, list(labels))
                    assert got == pytest.approx(want, abs=1e-12), (n, scores, labels)


class TestMeanAp:
    def test_classes_without_positives_are_skipped(self):
        scores = np.array([[0.9, 0.3], [0.1, 0.7]])
        labels = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert mean_average_precision(scores, labels) == 1.0

    def test_all_empty_returns_zero(self):
        assert mean_average_precision(np.ones((2, 2)), np.zeros((2, 2))) == 0.0

    def test_mean_over_classes(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.9], [0.1, 0.2]])
        labels = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        want = (average_precision(scores[:, 0], labels[:, 0]) + average_precision(scores[:, 1], labels[:, 1])) / 2
        assert mean_average_precision(scores, labels) == pytest.approx(want, abs=1e-12)


def test_accuracy():
    assert accuracy([1, 2, 3], [1, 2, 0]) == pytest.approx(2 / 3)


def test_alignment_range_and_value():
    vis = np.array([[1.0, 0.0], [0.0, 2.0]])
    key = np.array([[1.0, 0.0], [0.0, -1.0]])
    got = alignment(vis, key)
    assert got == pytest.approx(0.0, abs=1e-12)
    assert -1.0 <= got <= 1.0
