"""Volume-level classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _binary_inputs(scores, labels, need_both=True):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if s.size == 0:
        raise MetricError("empty input")
    if not np.isin(y, (0, 1, False, True)).all():
        raise MetricError("labels must be binary 0/1")
    y = y.astype(bool)
    if need_both and (y.all() or not y.any()):
        raise MetricError("both positive and negative labels are required")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outranks a negative (ties count 1/2)."""
    s, y = _binary_inputs(scores, labels)
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    n1 = int(y.sum())
    n0 = y.size - n1
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels):
    """(thresholds, fpr, tpr) over distinct scores, starting at (0, 0) with threshold +inf.

    Trapezoidal area under these points equals :func:`roc_auc`.
    """
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return np.r_[np.inf, s[last]], fpr, tpr


def pr_curve(scores, labels):
    """(thresholds, recall, precision) at each distinct score, descending thresholds."""
    s, y = _binary_inputs(scores, labels, need_both=False)
    if not y.any():
        raise MetricError("precision-recall needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    return s[last], tp / y.sum(), tp / predicted


def pr_auc(scores, labels) -> float:
    """Average precision: sum of precision times recall increments."""
    _, recall, precision = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion_at(scores, labels, threshold) -> ConfusionCounts:
    """Counts with ``score >= threshold`` read as a positive call."""
    s, y = _binary_inputs(scores, labels, need_both=False)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int((pred & y).sum()), fp=int((pred & ~y).sum()),
        tn=int((~pred & ~y).sum()), fn=int((~pred & y).sum()),
    )


def _ratio(a, b):
    return float(a / b) if b else float("nan")


def rates(cc: ConfusionCounts) -> dict:
    if cc.total < 1:
        raise MetricError("no samples")
    return {
        "sensitivity": _ratio(cc.tp, cc.tp + cc.fn),
        "specificity": _ratio(cc.tn, cc.tn + cc.fp),
        "accuracy": (cc.tp + cc.tn) / cc.total,
    }


def cohens_kappa(predicted, truth, return_flag=False):
    """Cohen's kappa for any label alphabet.

    When chance agreement is total (p_e == 1) the ratio is undefined; 1.0 is
    returned if observed agreement is perfect, else 0.0, and ``return_flag``
    exposes that the marginals were degenerate.
    """
    a = np.asarray(predicted).ravel()
    b = np.asarray(truth).ravel()
    if a.shape != b.shape:
        raise MetricError(f"length mismatch ({a.size} vs {b.size})")
    if a.size == 0:
        raise MetricError("empty input")
    cats, inv = np.unique(np.r_[a, b], return_inverse=True)
    ia, ib = inv[:a.size], inv[a.size:]
    k = cats.size
    table = np.zeros((k, k))
    np.add.at(table, (ia, ib), 1.0)
    n = a.size
    p_o = np.trace(table) / n
    p_e = float(table.sum(axis=1) @ table.sum(axis=0)) / n ** 2
    degenerate = bool(np.isclose(p_e, 1.0, rtol=0, atol=1e-15))
    if degenerate:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = float((p_o - p_e) / (1.0 - p_e))
    return (kappa, degenerate) if return_flag else kappa


TABLE1_METRICS = ("sensitivity", "specificity", "auc", "kappa", "accuracy", "pr_auc")


def classification_report(scores, labels, threshold=0.5) -> dict:
    """The six operating-point and ranking metrics for a binary classifier."""
    s, y = _binary_inputs(scores, labels)
    cc = confusion_at(s, y, threshold)
    r = rates(cc)
    return {
        "sensitivity": r["sensitivity"],
        "specificity": r["specificity"],
        "auc": roc_auc(s, y),
        "kappa": cohens_kappa((s >= threshold).astype(int), y.astype(int)),
        "accuracy": r["accuracy"],
        "pr_auc": pr_auc(s, y),
        "threshold": float(threshold),
        "confusion": {"tp": cc.tp, "fp": cc.fp, "tn": cc.tn, "fn": cc.fn},
        "n": int(s.size),
    }
