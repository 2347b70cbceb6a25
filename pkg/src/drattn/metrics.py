"""Confusion-matrix metrics: accuracy, one-vs-rest Se/Sp/precision/F1, QWK."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class MetricError(ValueError):
    pass


class UndefinedKappaError(MetricError):
    """Kappa is 0/0: every truth and prediction falls in one class (or there are none)."""


@dataclass
class ConfusionMatrix:
    """Rows are true grades, columns predicted grades."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise MetricError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricError("confusion matrix has negative counts")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_from_predictions(truths, preds, num_classes: int = 5) -> ConfusionMatrix:
    t = np.asarray(truths, dtype=np.int64).ravel()
    p = np.asarray(preds, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise MetricError(f"{t.size} truths vs {p.size} predictions")
    for name, arr in (("truth", t), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"{name} grade outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return ConfusionMatrix(cm)


def binary_counts(cm: ConfusionMatrix, i: int) -> tuple:
    """One-vs-rest (TP, FP, TN, FN) for class ``i``."""
    if not 0 <= i < cm.num_classes:
        raise MetricError(f"class {i} outside [0, {cm.num_classes})")
    c = cm.counts
    tp = int(c[i, i])
    fn = int(c[i, :].sum()) - tp
    fp = int(c[:, i].sum()) - tp
    tn = cm.total - tp - fn - fp
    return tp, fp, tn, fn


def _ratio(num, den):
    """(value, degenerate): zero denominators report 0 and raise the flag."""
    return (num / den, False) if den else (0.0, True)


def accuracy(cm: ConfusionMatrix) -> float:
    return _ratio(int(np.trace(cm.counts)), cm.total)[0]


def sensitivity(cm: ConfusionMatrix, i: int) -> float:
    tp, fp, tn, fn = binary_counts(cm, i)
    return _ratio(tp, tp + fn)[0]


def specificity(cm: ConfusionMatrix, i: int) -> float:
    tp, fp, tn, fn = binary_counts(cm, i)
    return _ratio(tn, tn + fp)[0]


def precision(cm: ConfusionMatrix, i: int) -> float:
    tp, fp, tn, fn = binary_counts(cm, i)
    return _ratio(tp, tp + fp)[0]


def f1(cm: ConfusionMatrix, i: int) -> float:
    tp, fp, tn, fn = binary_counts(cm, i)
    return _ratio(tp, tp + 0.5 * (fn + fp))[0]


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    """1 - sum(W*O) / sum(W*E) with W[i, j] = (i - j)^2 / (L - 1)^2.

    Evaluated in exact rational arithmetic (the weight normaliser cancels),
    so perfect agreement gives exactly 1 and O == E gives exactly 0.
    """
    n = cm.total
    L = cm.num_classes
    if n == 0:
        raise UndefinedKappaError("no samples")
    c = cm.counts
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    observed = 0
    expected = 0
    for i in range(L):
        for j in range(L):
            w = (i - j) ** 2
            observed += w * int(c[i, j])
            expected += w * int(rows[i]) * int(cols[j])
    if expected == 0:
        raise UndefinedKappaError("kappa undefined: truths and predictions all share one class")
    return float(1 - Fraction(observed * n, expected))


@dataclass
class MetricsReport:
    accuracy: float
    f1_macro: float
    precision_macro: float
    sensitivity_macro: float
    specificity_macro: float
    kappa_qwk: float | None
    per_class: dict
    confusion_matrix: ConfusionMatrix
    micro: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """The ``eval`` report schema."""
        return {
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "precision_macro": self.precision_macro,
            "sensitivity_macro": self.sensitivity_macro,
            "specificity_macro": self.specificity_macro,
            "kappa_qwk": self.kappa_qwk,
            "per_class": self.per_class,
            "confusion_matrix": self.confusion_matrix.counts.tolist(),
        }


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    per_class = {}
    for i in range(cm.num_classes):
        tp, fp, tn, fn = binary_counts(cm, i)
        se, se_flag = _ratio(tp, tp + fn)
        sp, sp_flag = _ratio(tn, tn + fp)
        pr, pr_flag = _ratio(tp, tp + fp)
        f, f_flag = _ratio(tp, tp + 0.5 * (fn + fp))
        degenerate = [name for name, flag in
                      (("sensitivity", se_flag), ("specificity", sp_flag),
                       ("precision", pr_flag), ("f1", f_flag)) if flag]
        per_class[str(i)] = {
            "tp": tp, "fp": fp, "tn": tn, "fn": fn,
            "sensitivity": se, "specificity": sp, "precision": pr, "f1": f,
            "support": tp + fn, "degenerate": degenerate,
        }

    def macro(key):
        return float(np.mean([per_class[str(i)][key] for i in range(cm.num_classes)]))

    try:
        kappa = quadratic_weighted_kappa(cm)
    except UndefinedKappaError:
        kappa = None
    sums = np.array([binary_counts(cm, i) for i in range(cm.num_classes)]).sum(axis=0)
    tp, fp, tn, fn = (int(v) for v in sums)
    micro = {
        "sensitivity": _ratio(tp, tp + fn)[0],
        "specificity": _ratio(tn, tn + fp)[0],
        "precision": _ratio(tp, tp + fp)[0],
        "f1": _ratio(tp, tp + 0.5 * (fn + fp))[0],
    }
    return MetricsReport(
        accuracy=accuracy(cm),
        f1_macro=macro("f1"),
        precision_macro=macro("precision"),
        sensitivity_macro=macro("sensitivity"),
        specificity_macro=macro("specificity"),
        kappa_qwk=kappa,
        per_class=per_class,
        confusion_matrix=cm,
        micro=micro,
    )
