"""Ranking and calibration metrics against brute-force oracles."""

import math

import numpy as np
import pytest

from dessim.errors import MetricError
from dessim.metrics import auc, logloss


def brute_auc(scores, labels):
    """Pairwise counting definition, ties worth half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_hand_case(self):
        got = auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1.0]))
        assert abs(got - 0.75) < 1e-12

    def test_perfect_ranking(self):
        assert auc(np.array([0.1, 0.2, 0.3, 0.4]), np.array([0, 0, 1, 1.0])) == 1.0

    def test_inverted_ranking(self):
        assert auc(np.array([0.1, 0.2, 0.3, 0.4]), np.array([1, 1, 0, 0.0])) == 0.0

    def test_constant_scores_are_chance(self):
        got = auc(np.full(4, 0.7), np.array([0, 1, 0, 1.0]))
        assert abs(got - 0.5) < 1e-12

    def test_tie_worth_half(self):
        got = auc(np.array([0.5, 0.5, 0.9]), np.array([0, 1, 1.0]))
        assert abs(got - 0.75) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auc(np.linspace(0, 1, 4), np.ones(4))
        with pytest.raises(MetricError):
            auc(np.linspace(0, 1, 4), np.zeros(4))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricError):
            auc(np.linspace(0, 1, 5), np.ones(4))

    def test_matches_pairwise_counting(self):
        rng = np.random.default_rng(80)
        for trial in range(50):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, n).astype(np.float64)
            if labels.min() == labels.max():
                labels[0] = 1.0 - labels[0]
            # coarse grid forces plenty of ties
            scores = rng.integers(0, 5, n) / 4.0
            assert abs(auc(scores, labels) - brute_auc(scores, labels)) < 1e-12, trial


class TestLogloss:
    def test_coin_flip(self):
        got = logloss(np.array([0.5, 0.5]), np.array([0, 1.0]))
        assert abs(got - math.log(2.0)) < 1e-15

    def test_hand_case(self):
        got = logloss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        want = -0.5 * (math.log(0.9) + math.log(0.8))
        assert abs(got - want) < 1e-12

    def test_confident_and_right_is_cheap(self):
        got = logloss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert got == pytest.approx(-math.log(1.0 - 1e-15), abs=1e-18)

    def test_confident_and_wrong_is_clamped(self):
        got = logloss(np.array([0.0]), np.array([1.0]))
        assert got == pytest.approx(-math.log(1e-15))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricError):
            logloss(np.full(4, 0.5), np.ones(3))
