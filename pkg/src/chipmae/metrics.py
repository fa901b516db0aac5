"""Classification metrics with explicit zero-division and tie conventions.

All 0/0 ratios are defined as 0. Ranking ties in average precision are broken
by sample index (stable sort), so every metric is a pure function of its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


def prf_from_counts(tp: float, fp: float, fn: float) -> PRF:
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    return PRF(p, r, _safe_div(2 * p * r, p + r))


def micro_prf(decisions: np.ndarray, truth: np.ndarray) -> PRF:
    """Pool every (sample, class) decision into one confusion count."""
    decisions = np.asarray(decisions, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if decisions.shape != truth.shape:
        raise ValueError("decision/truth shape mismatch")
    tp = float(np.sum(decisions & truth))
    fp = float(np.sum(decisions & ~truth))
    fn = float(np.sum(~decisions & truth))
    return prf_from_counts(tp, fp, fn)


def macro_prf(decisions: np.ndarray, truth: np.ndarray) -> PRF:
    """Unweighted mean of per-class precision/recall/F1.

    A class with no positive truths and no positive decisions scores 0 on all
    three, by the 0/0 rule; it still counts in the mean.
    """
    decisions = np.asarray(decisions, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    per_class = [
        prf_from_counts(
            float(np.sum(decisions[:, c] & truth[:, c])),
            float(np.sum(decisions[:, c] & ~truth[:, c])),
            float(np.sum(~decisions[:, c] & truth[:, c])),
        )
        for c in range(truth.shape[1])
    ]
    n = len(per_class)
    return PRF(sum(m.precision for m in per_class) / n,
               sum(m.recall for m in per_class) / n,
               sum(m.f1 for m in per_class) / n)


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Precision averaged at each true-positive rank of the score-sorted list.

    Descending score order; equal scores keep ascending index order. Returns
    0 when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise ValueError("score/truth length mismatch")
    positives = int(truth.sum())
    if positives == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = truth[order]
    ranks = np.arange(1, len(hits) + 1)
    cum_tp = np.cumsum(hits)
    precision_at_tp = cum_tp[hits] / ranks[hits]
    return float(precision_at_tp.sum() / positives)


def mean_average_precision(scores: np.ndarray,
                           truth: np.ndarray) -> tuple[float, float, list[float]]:
    """(micro mAP, macro mAP, per-class AP) for (n, C) score/truth matrices.

    Micro runs one AP over the row-major flattened (sample, class) list;
    macro is the unweighted mean of per-class APs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise ValueError("expected matching (n, C) matrices")
    per_class = [average_precision(scores[:, c], truth[:, c])
                 for c in range(scores.shape[1])]
    micro = average_precision(scores.ravel(), truth.ravel())
    macro = float(np.mean(per_class)) if per_class else 0.0
    return micro, macro, per_class


def overall_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Exact-match fraction for single-label predictions."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise ValueError("prediction/label length mismatch")
    if predicted.size == 0:
        return 0.0
    return float(np.mean(predicted == labels))
