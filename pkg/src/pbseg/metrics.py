"""Confusion-matrix metrics: per-class IoU/F1, mIoU, mF1 and overall accuracy."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """``C x C`` pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
        n = self.num_classes
        for name, arr in (("gt", gt), ("pred", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} holds classes outside [0, {n})")
        idx = n * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(gt, pred)


def _pct(x: float) -> float:
    return round(100.0 * float(x), 2)


def raw_metrics(cm: ConfusionMatrix) -> dict:
    """Unrounded fractions; classes absent from both gt and pred are NaN."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    seen = (tp + fp + fn) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(seen, tp / (tp + fp + fn), np.nan)
        f1 = np.where(seen, 2 * tp / (2 * tp + fp + fn), np.nan)
    return {
        "per_class_iou": iou,
        "miou": float(np.nanmean(iou)),
        "per_class_f1": f1,
        "mf1": float(np.nanmean(f1)),
        "oa": float(tp.sum() / total),
    }


def metrics(cm: ConfusionMatrix) -> dict:
    """Percentages with two decimals, JSON-ready (``None`` for excluded classes)."""
    raw = raw_metrics(cm)
    per = lambda arr: [None if np.isnan(v) else _pct(v) for v in arr]  # noqa: E731
    return {
        "per_class_iou": per(raw["per_class_iou"]),
        "miou": _pct(raw["miou"]),
        "per_class_f1": per(raw["per_class_f1"]),
        "mf1": _pct(raw["mf1"]),
        "oa": _pct(raw["oa"]),
    }
