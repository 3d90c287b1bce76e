"""Segmentation accuracy (mIoU) and calibration error (ECE)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_BINS = 15


class ConfusionMatrix:
    """Mergeable pixel confusion counts; rows are ground truth."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, true, ignore_index: int | None = None) -> None:
        pred = np.asarray(pred).reshape(-1)
        true = np.asarray(true).reshape(-1)
        if pred.shape != true.shape:
            raise ValueError(f"prediction and label shapes differ: {pred.shape} vs {true.shape}")
        keep = np.ones_like(true, dtype=bool) if ignore_index is None else true != ignore_index
        n = self.n_classes
        idx = true[keep] * n + pred[keep]
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> tuple[float, np.ndarray]:
        if self.total == 0:
            raise ValueError("no evaluated pixels (all ignored)")
        inter = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        per_class = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        present = union > 0
        return float(per_class[present].mean()), per_class


def miou(pred_mask, true_mask, n_classes: int, ignore_index: int | None = None):
    """Return ``(miou, per_class_iou)``; zero-union classes are left out of the mean."""
    pred_mask, true_mask = np.asarray(pred_mask), np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    cm = ConfusionMatrix(n_classes)
    cm.update(pred_mask, true_mask, ignore_index)
    return cm.iou()


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    # right-closed bins (lo, hi]; zero confidence falls in the first bin
    return np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)


@dataclass
class CalibrationBins:
    """Per-bin counts, summed confidence and number correct."""

    n_bins: int = N_BINS
    count: np.ndarray = field(default=None)
    conf_sum: np.ndarray = field(default=None)
    correct: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.count is None:
            self.count = np.zeros(self.n_bins, dtype=np.int64)
            self.conf_sum = np.zeros(self.n_bins)
            self.correct = np.zeros(self.n_bins, dtype=np.int64)

    def update(self, max_prob, correct) -> None:
        p = np.asarray(max_prob, dtype=np.float64).reshape(-1)
        c = np.asarray(correct).reshape(-1).astype(bool)
        idx = _bin_index(p, self.n_bins)
        self.count += np.bincount(idx, minlength=self.n_bins)
        self.conf_sum += np.bincount(idx, weights=p, minlength=self.n_bins)
        self.correct += np.bincount(idx, weights=c, minlength=self.n_bins).astype(np.int64)

    def merge(self, other: "CalibrationBins") -> "CalibrationBins":
        return CalibrationBins(self.n_bins, self.count + other.count,
                               self.conf_sum + other.conf_sum, self.correct + other.correct)

    def ece(self) -> float:
        total = self.count.sum()
        if total == 0:
            return 0.0
        nz = self.count > 0
        acc = self.correct[nz] / self.count[nz]
        conf = self.conf_sum[nz] / self.count[nz]
        return float(np.sum(self.count[nz] / total * np.abs(acc - conf)))


def ece(max_prob, correct, n_bins: int = N_BINS) -> float:
    """Expected calibration error with equal-width confidence bins."""
    bins = CalibrationBins(n_bins)
    bins.update(max_prob, correct)
    return bins.ece()
