"""Classification metrics: accuracy, macro precision/F1, macro one-vs-rest
AUC (Mann-Whitney with half credit for ties), and the confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given label set (e.g. a missing class)."""


@dataclass
class MetricsReport:
    acc: float
    auc_macro: float
    f1_macro: float
    precision_macro: float
    confusion: np.ndarray
    n: int

    def lines(self):
        return [
            f"acc={self.acc:.6f}",
            f"auc_macro={self.auc_macro:.6f}",
            f"f1_macro={self.f1_macro:.6f}",
            f"precision_macro={self.precision_macro:.6f}",
            f"n={self.n}",
        ]


def confusion_matrix(pred_labels, true_labels, k: int) -> np.ndarray:
    """Entry (i, j) counts samples with true class i predicted as j."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= k or true.min() < 0 or true.max() >= k):
        raise ValueError(f"labels out of range [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def accuracy(confusion: np.ndarray) -> float:
    n = int(confusion.sum())
    return float(np.trace(confusion)) / n if n else 0.0


def precision_macro(confusion: np.ndarray) -> float:
    k = confusion.shape[0]
    vals = []
    for j in range(k):
        predicted = confusion[:, j].sum()
        vals.append(confusion[j, j] / predicted if predicted else 0.0)
    return float(np.mean(vals))


def f1_macro(confusion: np.ndarray) -> float:
    k = confusion.shape[0]
    vals = []
    for j in range(k):
        predicted = confusion[:, j].sum()
        actual = confusion[j, :].sum()
        p = confusion[j, j] / predicted if predicted else 0.0
        r = confusion[j, j] / actual if actual else 0.0
        vals.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(vals))


def roc_auc_binary(scores, binary_labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(binary_labels, dtype=np.int64)
    npos = int((y == 1).sum())
    nneg = int((y == 0).sum())
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average ranks (1-based), shared across tied groups
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg))


def roc_auc_ovr_macro(probs, labels) -> float:
    """Unweighted mean of one-vs-rest binary AUCs."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    k = p.shape[1]
    aucs = []
    for c in range(k):
        pos = (y == c).astype(np.int64)
        if pos.sum() == 0 or pos.sum() == len(y):
            raise UndefinedMetricError(f"class {c} missing from labels, AUC undefined")
        aucs.append(roc_auc_binary(p[:, c], pos))
    return float(np.mean(aucs))


def report(probs, labels, k: int, strict_auc: bool = True) -> MetricsReport:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = p.argmax(axis=1)
    cm = confusion_matrix(pred, y, k)
    if strict_auc:
        auc = roc_auc_ovr_macro(p, y)
    else:
        try:
            auc = roc_auc_ovr_macro(p, y)
        except UndefinedMetricError:
            auc = float("nan")
    return MetricsReport(
        acc=accuracy(cm),
        auc_macro=auc,
        f1_macro=f1_macro(cm),
        precision_macro=precision_macro(cm),
        confusion=cm,
        n=len(y),
    )
