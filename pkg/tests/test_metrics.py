"""ROC/EER/accuracy against a brute-force threshold-sweep oracle."""

import numpy as np
import pytest

from pulseprint import metrics as me
from pulseprint.errors import MetricError


def brute_force_roc(scores, labels):
    """O(n * t) per-threshold counting, the independent oracle."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    gen = scores[labels == 1]
    imp = scores[labels == 0]
    rows = []
    for t in thresholds:
        far = float(np.mean(imp >= t))
        frr = float(np.mean(gen < t))
        rows.append((t, far, frr))
    return np.array(rows)


class TestRoc:
    def test_separable_has_zero_error_point(self):
        s = me.ScoreSet([0.9] * 5 + [0.1] * 5, [1] * 5 + [0] * 5)
        curve = me.roc(s)
        assert any(far == 0.0 and frr == 0.0 for _, far, frr in curve)
        assert me.eer(curve) == 0.0

    def test_constant_scores(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        s = me.ScoreSet(np.full(50, 0.5), labels)
        curve = me.roc(s)
        np.testing.assert_allclose(curve[:, 1] + curve[:, 2], 1.0, atol=1e-12)
        assert me.eer(curve) == pytest.approx(0.5)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(77)
        for trial in range(10):
            n = int(rng.integers(10, 2000))
            scores = np.round(rng.random(n), 3)  # force ties
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            curve = me.roc(me.ScoreSet(scores, labels))
            oracle = brute_force_roc(scores, labels)
            np.testing.assert_array_equal(curve, oracle)

    def test_monotone(self):
        rng = np.random.default_rng(5)
        scores = rng.random(400)
        labels = rng.integers(0, 2, size=400)
        labels[:2] = [0, 1]
        curve = me.roc(me.ScoreSet(scores, labels))
        assert np.all(np.diff(curve[:, 1]) <= 0)
        assert np.all(np.diff(curve[:, 2]) >= 0)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            me.roc(me.ScoreSet([0.1, 0.9], [1, 1]))


class TestEer:
    def test_hand_built_crossing(self):
        curve = np.array([
            [-np.inf, 0.5, 0.0],
            [0.3, 0.3, 0.2],
            [0.6, 0.2, 0.3],
            [np.inf, 0.0, 1.0],
        ])
        assert me.eer(curve) == pytest.approx(0.25)

    def test_random_scorer_near_half(self):
        rng = np.random.default_rng(123)
        n = 10_000
        scores = rng.random(n)
        labels = rng.integers(0, 2, size=n)
        e = me.eer(me.roc(me.ScoreSet(scores, labels)))
        assert 0.45 <= e <= 0.55

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(9)
        scores = rng.random(500)
        labels = rng.integers(0, 2, size=500)
        labels[:2] = [0, 1]
        base = me.eer(me.roc(me.ScoreSet(scores, labels)))
        for f in (lambda s: 3 * s + 1, np.exp, lambda s: s ** 3):
            e = me.eer(me.roc(me.ScoreSet(f(scores), labels)))
            assert e == pytest.approx(base, abs=1e-12)

    def test_step_variant_close_to_linear(self):
        rng = np.random.default_rng(31)
        scores = rng.random(2000)
        labels = rng.integers(0, 2, size=2000)
        labels[:2] = [0, 1]
        curve = me.roc(me.ScoreSet(scores, labels))
        assert abs(me.eer(curve) - me.eer_step(curve)) < 0.05


class TestAccuracy:
    def test_all_correct(self):
        s = me.ScoreSet([0.9, 0.8, 0.1], [1, 1, 0])
        assert me.accuracy(s, threshold=0.5) == 1.0

    def test_all_wrong(self):
        s = me.ScoreSet([0.1, 0.2, 0.9], [1, 1, 0])
        assert me.accuracy(s, threshold=0.5) == 0.0

    def test_counting(self):
        s = me.ScoreSet([0.9, 0.8, 0.6, 0.1], [1, 1, 0, 0])
        assert me.accuracy(s, threshold=0.5) == pytest.approx(0.75)

    def test_default_threshold_is_eer_point(self):
        s = me.ScoreSet([0.9, 0.85, 0.2, 0.1], [1, 1, 0, 0])
        assert me.accuracy(s) == 1.0
