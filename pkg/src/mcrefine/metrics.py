"""Pixel-wise confusion counts and the class-imbalance-aware metric suite."""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

METRIC_NAMES = ("dice", "recall", "fnr", "tnr", "balanced_accuracy", "gmean", "precision", "f2")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class CaseMetrics:
    dice: float
    recall: float
    fnr: float
    tnr: float
    balanced_accuracy: float
    gmean: float
    precision: float
    f2: float
    degenerate: bool = False

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)


def confusion(pred, gt, roi=None) -> ConfusionCounts:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if roi is not None:
        keep = np.asarray(roi) > 0
        if keep.shape != gt.shape:
            raise ValueError("ROI shape does not match")
        pred, gt = pred[keep], gt[keep]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> float:
    # Undefined ratios are NaN and get flagged/excluded rather than guessed.
    return num / den if den else math.nan


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def fnr(c: ConfusionCounts) -> float:
    return _ratio(c.fn, c.fn + c.tp)


def tnr(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def balanced_accuracy(c: ConfusionCounts) -> float:
    return (recall(c) + tnr(c)) / 2


def gmean(c: ConfusionCounts) -> float:
    return math.sqrt(recall(c) * tnr(c))


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def f2(c: ConfusionCounts) -> float:
    """F2 from precision and recall; the count form covers TP = 0 with misses."""
    p, r = precision(c), recall(c)
    if math.isnan(p) or math.isnan(r) or p + r == 0:
        return _ratio(5 * c.tp, 5 * c.tp + 4 * c.fn + c.fp)
    return 5 * p * r / (4 * p + r)


def case_metrics(c: ConfusionCounts) -> CaseMetrics:
    return CaseMetrics(
        dice=dice(c), recall=recall(c), fnr=fnr(c), tnr=tnr(c),
        balanced_accuracy=balanced_accuracy(c), gmean=gmean(c),
        precision=precision(c), f2=f2(c),
        degenerate=(c.tp + c.fn) == 0,
    )


def evaluate_case(prob, gt, threshold: float = 0.5, roi=None) -> CaseMetrics:
    prob = np.asarray(prob)
    if prob.shape != np.shape(gt):
        raise ValueError(f"shape mismatch: {prob.shape} vs {np.shape(gt)}")
    return case_metrics(confusion(prob >= threshold, gt, roi))


def evaluate_cohort(cases) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of each metric.

    Degenerate cases (empty ground truth) and undefined values are skipped.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("cohort is empty")
    out = {}
    for k in METRIC_NAMES:
        vals = np.array([getattr(c, k) for c in cases if not c.degenerate], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[k] = (float(vals.mean()), float(vals.std())) if vals.size else (math.nan, math.nan)
    return out
