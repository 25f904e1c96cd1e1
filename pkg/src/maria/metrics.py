"""AUC and MCC for binary and multiclass problems."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


class DegenerateMCCWarning(UserWarning):
    pass


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    # Mann-Whitney U: average ranks give ties half credit
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Rank AUC; macro one-vs-rest for more than two classes.

    ``scores`` is either a 1-D positive-class score or ``[n, C]`` class scores.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise UndefinedMetricError("AUC is undefined with a single class present")
    if scores.ndim == 1:
        return _binary_auc(scores, labels == classes.max())
    if scores.shape[1] == 2:
        return _binary_auc(scores[:, 1], labels == 1)
    return float(np.mean([_binary_auc(scores[:, c], labels == c) for c in classes]))


def confusion_matrix(pred, true, n_classes: int | None = None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.intp)
    true = np.asarray(true, dtype=np.intp)
    if pred.shape != true.shape:
        raise ValueError(f"pred and true lengths differ: {pred.shape} vs {true.shape}")
    c = n_classes or int(max(pred.max(initial=0), true.max(initial=0)) + 1)
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def mcc(pred_labels, true_labels, n_classes: int | None = None) -> float:
    """Matthews correlation via the C x C confusion-matrix form.

    For two classes this reduces to the TP/FP/TN/FN formula. A zero
    denominator yields 0.0 and a :class:`DegenerateMCCWarning`.
    """
    true = np.asarray(true_labels)
    if np.unique(true).size < 2:
        raise UndefinedMetricError("MCC needs at least two classes in the ground truth")
    cm = confusion_matrix(pred_labels, true_labels, n_classes).astype(np.float64)
    s = cm.sum()
    correct = np.trace(cm)
    p_k = cm.sum(axis=0)  # predicted counts
    t_k = cm.sum(axis=1)  # true counts
    cov = correct * s - p_k @ t_k
    # one square root of the (integer-valued) product keeps perfect scores at exactly +-1
    denom = np.sqrt((s * s - p_k @ p_k) * (s * s - t_k @ t_k))
    if denom == 0:
        warnings.warn("MCC denominator is zero; returning 0.0", DegenerateMCCWarning, stacklevel=2)
        return 0.0
    return float(cov / denom)
