"""Confusion matrix, per-class IoU and mIoU."""

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    """counts[t, p]: points of true class t predicted as p."""

    n_classes: int = 2
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise DataError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n_classes, self.n_classes) or np.any(self.counts < 0):
                raise DataError(f"counts must be a non-negative {self.n_classes}x{self.n_classes} matrix")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, truths, preds) -> "ConfusionMatrix":
        truths = np.asarray(truths, dtype=np.int64).reshape(-1)
        preds = np.asarray(preds, dtype=np.int64).reshape(-1)
        if len(truths) != len(preds):
            raise DataError(f"{len(truths)} truths but {len(preds)} predictions")
        for name, ids in (("truth", truths), ("prediction", preds)):
            if len(ids) and (ids.min() < 0 or ids.max() >= self.n_classes):
                raise DataError(f"{name} class id out of range for {self.n_classes} classes")
        c = self.n_classes
        self.counts += np.bincount(truths * c + preds, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError(f"cannot merge {other.n_classes}-class matrix into {self.n_classes}-class one")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def accumulate(cm: ConfusionMatrix, truths, preds) -> ConfusionMatrix:
    return cm.update(truths, preds)


def merge_all(matrices: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    matrices = list(matrices)
    if not matrices:
        raise DataError("nothing to merge")
    merged = matrices[0]
    for cm in matrices[1:]:
        merged = merged.merge(cm)
    return merged


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """(per-class IoU, mean over classes present in truth or prediction)."""
    ious = cm.iou()
    if np.all(np.isnan(ious)):
        raise DataError("mIoU undefined: no class occurs in truth or prediction")
    return ious.tolist(), float(np.nanmean(ious))


def scene_miou(truths, preds, n_classes: int = 2) -> float:
    return miou(ConfusionMatrix(n_classes).update(truths, preds))[1]
