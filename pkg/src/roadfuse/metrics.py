"""Classification metrics for imbalanced multi-class evaluation.

Accuracy is trace/total. Per-class precision/recall/F1 use the
zero-denominator convention metric = 0 (a never-predicted class scores
0.0, matching how such baselines are usually reported). Macro-F1 is the
unweighted mean of per-class F1. The normalized confusion matrix is
row-normalized; all-zero rows are left as zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    """counts[i][j] = samples of true class i predicted as class j."""

    counts: np.ndarray
    classes: list

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {arr.shape}")
        if arr.shape[0] != len(self.classes):
            raise ValueError("confusion matrix size does not match class names")
        if (arr < 0).any() or not np.issubdtype(arr.dtype, np.integer):
            if not np.allclose(arr, np.round(arr)) or (arr < 0).any():
                raise ValueError("confusion counts must be non-negative integers")
            arr = np.round(arr).astype(np.int64)
        self.counts = arr.astype(np.int64)

    @classmethod
    def from_pairs(cls, true_idx, pred_idx, classes) -> "ConfusionMatrix":
        k = len(classes)
        counts = np.zeros((k, k), dtype=np.int64)
        for t, p in zip(true_idx, pred_idx):
            counts[int(t), int(p)] += 1
        return cls(counts, list(classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list
    macro_f1: float
    normalized: np.ndarray
    confusion: ConfusionMatrix
    per_condition: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {m.name: {"precision": m.precision, "recall": m.recall,
                                   "f1": m.f1, "support": m.support}
                          for m in self.per_class},
            "normalized_confusion": self.normalized.tolist(),
            "confusion": self.confusion.counts.tolist(),
            "classes": list(self.confusion.classes),
            "per_condition": self.per_condition,
        }


def _safe_div(num: float, denom: float) -> float:
    return num / denom if denom else 0.0


def metrics_from_confusion(confusion) -> MetricsReport:
    """Derive every metric from the count matrix."""
    if not isinstance(confusion, ConfusionMatrix):
        raise TypeError("metrics_from_confusion expects a ConfusionMatrix")
    counts = confusion.counts
    total = counts.sum()
    accuracy = _safe_div(float(np.trace(counts)), float(total))

    per_class = []
    for i, name in enumerate(confusion.classes):
        tp = float(counts[i, i])
        fp = float(counts[:, i].sum() - counts[i, i])
        fn = float(counts[i, :].sum() - counts[i, i])
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class.append(ClassMetrics(name=name, precision=precision, recall=recall,
                                      f1=f1, support=int(counts[i, :].sum())))
    macro_f1 = float(np.mean([m.f1 for m in per_class])) if per_class else 0.0

    row_sums = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, row_sums, out=np.zeros(counts.shape, dtype=np.float64),
                           where=row_sums > 0)
    return MetricsReport(accuracy=accuracy, per_class=per_class, macro_f1=macro_f1,
                         normalized=normalized, confusion=confusion)
