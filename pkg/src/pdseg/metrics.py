"""Confusion-matrix segmentation metrics with an ignore label."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["IGNORE_LABEL", "ConfusionMatrix", "Scores"]

IGNORE_LABEL = 255


@dataclass(frozen=True)
class Scores:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float


class ConfusionMatrix:
    """K x K counts with ground truth on rows and predictions on columns.

    Pixels whose ground-truth label equals IGNORE_LABEL are skipped; any
    other id >= num_classes (in either argument) is an error.  Matrices for
    disjoint image sets add together into the matrix of their union.
    """

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        if not np.issubdtype(pred.dtype, np.integer) or not np.issubdtype(gt.dtype, np.integer):
            raise ValueError("labels must be integer arrays")
        k = self.num_classes
        gt = gt.reshape(-1).astype(np.int64)
        pred = pred.reshape(-1).astype(np.int64)
        keep = gt != IGNORE_LABEL
        gt = gt[keep]
        pred = pred[keep]
        if gt.size and (gt.min() < 0 or gt.max() >= k):
            raise ValueError(f"ground-truth id outside [0, {k}) and not ignore")
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"predicted id outside [0, {k})")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def __add__(self, other):
        return self.merge(other)

    def scores(self) -> Scores:
        """PA over all counted pixels; MA over classes that occur in the
        ground truth; mIoU over classes present in ground truth or
        predictions."""
        total = self.counts.sum()
        if total == 0:
            raise ValueError("empty confusion matrix has no defined scores")
        diag = np.diag(self.counts).astype(np.float64)
        rows = self.counts.sum(axis=1).astype(np.float64)
        cols = self.counts.sum(axis=0).astype(np.float64)
        pa = float(diag.sum() / total)
        seen = rows > 0
        ma = float(np.mean(diag[seen] / rows[seen]))
        union = rows + cols - diag
        active = union > 0
        miou = float(np.mean(diag[active] / union[active]))
        return Scores(pixel_accuracy=pa, mean_accuracy=ma, mean_iou=miou)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class appears in neither gt nor pred."""
        diag = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, diag / union, np.nan)
