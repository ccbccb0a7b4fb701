"""Binary-classification evaluation: confusion matrix, threshold metrics,
ROC construction, and trapezoidal AUC.

Label convention: 1 = significant (positive), 0 = nonsignificant. All
arithmetic is double precision. Undefined ratios are reported as 0 together
with a degeneracy flag instead of raising, so whole-pipeline evaluation never
aborts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class OneClassOnly(ValueError):
    """ROC is undefined when labels contain a single class."""


CSV_COLUMNS = ("model", "accuracy", "precision", "sensitivity",
               "specificity", "f1", "mcc", "auc")


def _fmt(x: float | None) -> str:
    return "nan" if x is None else f"{x:.12g}"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")
        if self.total == 0:
            raise EmptyInput("confusion matrix has no counts")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    """Sequence of (fpr, tpr) points from (0,0) to (1,1), both non-decreasing."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = self.points
        if len(pts) < 2 or pts[0] != (0.0, 0.0) or pts[-1] != (1.0, 1.0):
            raise ValueError("curve must run from (0,0) to (1,1)")
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if x1 < x0 or y1 < y0:
                raise ValueError("fpr and tpr must be non-decreasing")


@dataclass
class MetricsReport:
    """The seven report columns; ``degenerate`` names any metric whose
    defining ratio had a zero denominator (reported as 0 by convention)."""

    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    mcc: float
    auc: float | None = None
    degenerate: tuple[str, ...] = field(default=())

    def to_text(self) -> str:
        lines = [
            f"accuracy={_fmt(self.accuracy)}",
            f"precision={_fmt(self.precision)}",
            f"sensitivity={_fmt(self.sensitivity)}",
            f"specificity={_fmt(self.specificity)}",
            f"f1={_fmt(self.f1)}",
            f"mcc={_fmt(self.mcc)}",
            f"auc={_fmt(self.auc)}",
        ]
        if self.degenerate:
            lines.append("degenerate=" + ",".join(self.degenerate))
        return "\n".join(lines) + "\n"

    def to_csv_row(self, model: str) -> str:
        vals = [model] + [_fmt(v) for v in (
            self.accuracy, self.precision, self.sensitivity,
            self.specificity, self.f1, self.mcc, self.auc)]
        return ",".join(vals)


def _as_binary(seq, name: str) -> np.ndarray:
    a = np.asarray(seq)
    if a.size == 0:
        raise EmptyInput(f"{name} is empty")
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return a.astype(np.int64).ravel()


def confusion_matrix(labels, preds) -> ConfusionMatrix:
    """Count tp/fp/tn/fn for 0/1 labels and predictions (1 = significant)."""
    y = _as_binary(labels, "labels")
    p = _as_binary(preds, "preds")
    if y.size != p.size:
        raise LengthMismatch(f"labels ({y.size}) and preds ({p.size}) differ")
    tp = int(((y == 1) & (p == 1)).sum())
    fp = int(((y == 0) & (p == 1)).sum())
    tn = int(((y == 0) & (p == 0)).sum())
    fn = int(((y == 1) & (p == 0)).sum())
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, precision, sensitivity, specificity, F1 and MCC from counts.

    AUC is left unset (it needs scores, not hard predictions). Zero
    denominators yield 0 plus a flag; in particular MCC is defined as 0 when
    any of its four marginal factors vanishes.
    """
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    degenerate: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = (tp + tn) / cm.total
    precision = ratio(tp, tp + fp, "precision")
    sensitivity = ratio(tp, tp + fn, "sensitivity")
    specificity = ratio(tn, fp + tn, "specificity")
    if precision + sensitivity == 0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = f1_from_precision_recall(precision, sensitivity)
    mcc_den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if mcc_den == 0:
        degenerate.append("mcc")
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(mcc_den)
    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        mcc=mcc,
        degenerate=tuple(degenerate),
    )


def roc_curve(labels, scores) -> RocCurve:
    """ROC points from a threshold sweep over the distinct scores, descending.

    Tied scores form a single combined step, which makes the trapezoidal area
    equal the pairwise-concordance (Mann-Whitney) statistic with ties
    counted 1/2.
    """
    y = _as_binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.size != s.size:
        raise LengthMismatch(f"labels ({y.size}) and scores ({s.size}) differ")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    # last index of each tied group = one point per distinct threshold
    group_end = np.flatnonzero(np.diff(s_sorted) != 0)
    idx = np.concatenate([group_end, [y.size - 1]])
    points = [(0.0, 0.0)]
    for i in idx:
        points.append((fps[i] / n_neg, tps[i] / n_pos))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return RocCurve(points=tuple(points))


def auc(curve: RocCurve) -> float:
    """Trapezoidal integral of tpr over fpr."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total
