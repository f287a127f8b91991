"""Verification metrics: ROC sweep (FAR/FRR), EER, thresholded accuracy.

Scores are match probabilities; label 1 marks genuine pairs. Acceptance is
score >= threshold, so FAR falls and FRR rises as the threshold sweeps up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.scores.shape != self.labels.shape:
            raise MetricError("scores and labels differ in length")

    def require_both_classes(self):
        if not ((self.labels == 1).any() and (self.labels == 0).any()):
            raise MetricError("need both genuine and impostor scores")


def roc(s: ScoreSet) -> np.ndarray:
    """(threshold, FAR, FRR) rows at sorted unique scores plus +/-inf sentinels.

    O(n log n): one sort, then cumulative genuine/impostor counts.
    """
    s.require_both_classes()
    n_gen = int((s.labels == 1).sum())
    n_imp = int((s.labels == 0).sum())
    order = np.argsort(s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    uniq, start = np.unique(sorted_scores, return_index=True)
    gen_below = np.concatenate([[0], np.cumsum(sorted_labels == 1)])
    imp_below = np.concatenate([[0], np.cumsum(sorted_labels == 0)])
    thresholds = np.concatenate([[-np.inf], uniq, [np.inf]])
    rows = []
    for t, i in zip(thresholds, np.concatenate([[0], start, [len(sorted_scores)]])):
        far = (n_imp - imp_below[i]) / n_imp   # impostors with score >= t
        frr = gen_below[i] / n_gen             # genuines with score < t
        rows.append((t, far, frr))
    return np.array(rows)


def eer(roc_curve: np.ndarray) -> float:
    """Equal error rate by linear interpolation of the FAR/FRR crossing."""
    far = roc_curve[:, 1]
    frr = roc_curve[:, 2]
    diff = far - frr
    idx = np.nonzero(diff <= 0)[0]
    if idx.size == 0:
        return float(min(far[-1], frr[-1]))
    i = idx[0]
    if i == 0 or diff[i] == 0:
        return float((far[i] + frr[i]) / 2.0)
    d0, d1 = diff[i - 1], diff[i]
    t = d0 / (d0 - d1)
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def eer_step(roc_curve: np.ndarray) -> float:
    """Step-interpolation alternative: midpoint at min |FAR - FRR|."""
    far = roc_curve[:, 1]
    frr = roc_curve[:, 2]
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0)


def eer_threshold(roc_curve: np.ndarray) -> float:
    """Finite threshold closest to the FAR/FRR crossing."""
    far = roc_curve[:, 1]
    frr = roc_curve[:, 2]
    finite = np.isfinite(roc_curve[:, 0])
    idx = np.nonzero(finite)[0]
    if idx.size == 0:
        return 0.5
    j = idx[np.argmin(np.abs(far[idx] - frr[idx]))]
    return float(roc_curve[j, 0])


def accuracy(s: ScoreSet, threshold: float | None = None) -> float:
    """Fraction of correct decisions at the threshold (default: EER point)."""
    if threshold is None:
        threshold = eer_threshold(roc(s))
    accept = s.scores >= threshold
    correct = (accept & (s.labels == 1)) | (~accept & (s.labels == 0))
    return float(correct.mean())


def roc_to_csv(path, roc_curve: np.ndarray):
    with open(path, "w") as fh:
        fh.write("threshold,far,frr\n")
        for t, far, frr in roc_curve:
            fh.write(f"{t!r},{far!r},{frr!r}\n")
