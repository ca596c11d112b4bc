"""Overlap metrics and precision-recall analysis for binary segmentations.

Zero-denominator conventions (so every number is defined):

* precision with no predicted positives is 1;
* sensitivity with no true positives in the truth is 1, specificity with no
  negatives is 1;
* DSC and F2 with empty prediction and empty truth are 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

__all__ = [
    "ConfusionCounts",
    "PRCurve",
    "binarize",
    "confusion",
    "precision",
    "dsc",
    "f2",
    "sensitivity",
    "specificity",
    "pr_curve",
    "write_pr_csv",
    "read_pr_csv",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigError(f"confusion counts must be nonnegative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def binarize(p0, threshold: float = 0.5) -> np.ndarray:
    """1 where ``p0 >= threshold`` (inclusive), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(p0) >= threshold).astype(np.uint8)


def confusion(pred, labels) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if pred.shape != labels.shape:
        raise ConfigError(f"shape mismatch: prediction {pred.shape} vs labels {labels.shape}")
    tp = int(np.count_nonzero(pred & labels))
    fp = int(np.count_nonzero(pred & ~labels))
    fn = int(np.count_nonzero(~pred & labels))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num, den, empty):
    return num / den if den > 0 else empty


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, 1.0)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, 1.0)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, 1.0)


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0)


def f2(c: ConfusionCounts) -> float:
    return _ratio(5 * c.tp, 5 * c.tp + 4 * c.fn + c.fp, 1.0)


@dataclass
class PRCurve:
    """PR points ordered by strictly decreasing threshold, plus the APR score."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    apr: float

    def __len__(self) -> int:
        return len(self.thresholds)

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def trapezoid_area(self) -> float:
        """Linear interpolation of the curve, anchored at (recall 0, first precision)."""
        r = np.concatenate([[0.0], self.recall])
        p = np.concatenate([[self.precision[0]], self.precision])
        return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))

    def thinned(self, max_points: int) -> "PRCurve":
        """Subsample to at most ``max_points`` points, keeping both ends."""
        n = len(self)
        if n <= max_points:
            return self
        idx = np.unique(np.linspace(0, n - 1, max_points).round().astype(int))
        return PRCurve(self.thresholds[idx], self.precision[idx], self.recall[idx], self.apr)


def pr_curve(scores, labels, interpolation: str = "step") -> PRCurve:
    """Precision-recall curve with one point per distinct score.

    Thresholds are visited from high to low, voxels with ``score >= t`` count
    as predicted lesion. ``apr`` is step-wise average precision
    ``sum_k (R_k - R_{k-1}) * P_k`` with ``R_0 = 0``, or the trapezoidal area
    when ``interpolation="trapezoid"``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ConfigError(f"scores {scores.shape} and labels {labels.shape} differ in size")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ConfigError("pr_curve needs at least one positive label")
    # stable sort on -score: ties keep voxel order
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    hits = np.cumsum(labels[order])
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = hits[last].astype(np.float64)
    predicted = (last + 1).astype(np.float64)
    prec = tp / predicted
    rec = tp / n_pos
    curve = PRCurve(s[last].copy(), prec, rec, 0.0)
    if interpolation == "step":
        curve.apr = float(np.sum(np.diff(np.r_[0.0, rec]) * prec))
    elif interpolation == "trapezoid":
        curve.apr = curve.trapezoid_area()
    else:
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    return curve


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            w.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])


def read_pr_csv(path: str | Path) -> PRCurve:
    """Load a curve written by :func:`write_pr_csv`; ``apr`` is recomputed stepwise."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, p, r = data[:, 0], data[:, 1], data[:, 2]
    apr = float(np.sum(np.diff(np.r_[0.0, r]) * p))
    return PRCurve(t, p, r, apr)
