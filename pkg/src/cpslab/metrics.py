"""Segmentation metrics: streaming confusion matrix, mIoU, overlap ratio."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, EvaluationError
from .losses import IGNORE_INDEX

__all__ = ["ConfusionMatrix", "accumulate", "miou", "overlap_ratio"]


@dataclass
class ConfusionMatrix:
    """K x K pixel counts; rows = ground truth, cols = prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes),
                                   dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise DimensionError(
                f"confusion matrix must be {self.num_classes}x"
                f"{self.num_classes}, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray,
               ignore: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Add one batch of pixels; ignored ground truth is skipped.

    Accumulation is a plain sum of counts, so batch splits and ordering
    cannot change the result.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"accumulate: pred shape {pred.shape} != gt shape {gt.shape}")
    K = conf.num_classes
    valid = gt != ignore
    p = pred[valid]
    g = gt[valid]
    if p.size and (p.min() < 0 or p.max() >= K):
        raise DataError(f"accumulate: prediction outside [0, {K})")
    if g.size and (g.min() < 0 or g.max() >= K):
        raise DataError(f"accumulate: ground truth outside [0, {K})")
    conf.counts += np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return conf


def miou(conf: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where a class is absent from gt and prediction)
    and the mean over present classes."""
    if conf.total == 0:
        raise EvaluationError("miou: empty confusion matrix")
    diag = np.diag(conf.counts).astype(np.float64)
    row = conf.counts.sum(axis=1).astype(np.float64)
    col = conf.counts.sum(axis=0).astype(np.float64)
    denom = row + col - diag
    present = denom > 0
    if not present.any():
        raise EvaluationError("miou: no class present in gt or prediction")
    iou = np.full(conf.num_classes, np.nan)
    iou[present] = diag[present] / denom[present]
    return iou, float(iou[present].mean())


def overlap_ratio(y1, y2, gt, background: int = 0,
                  exclude_predicted_background: bool = False) -> float:
    """Fraction of object pixels (gt != background) where the two predicted
    maps agree.

    With ``exclude_predicted_background`` the pixels where either prediction
    says background are additionally dropped from the denominator. Returns
    0 (with a RuntimeWarning) when no pixel qualifies.
    """
    a = y1.labels if hasattr(y1, "labels") else np.asarray(y1)
    b = y2.labels if hasattr(y2, "labels") else np.asarray(y2)
    g = gt.labels if hasattr(gt, "labels") else np.asarray(gt)
    if a.shape != b.shape or a.shape != g.shape:
        raise DimensionError(
            f"overlap_ratio: shapes differ: {a.shape}, {b.shape}, {g.shape}")
    region = (g != background) & (g != IGNORE_INDEX)
    if exclude_predicted_background:
        region &= (a != background) & (b != background)
    n = int(region.sum())
    if n == 0:
        warnings.warn("overlap_ratio: no object pixels in region",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float((a[region] == b[region]).sum() / n)
