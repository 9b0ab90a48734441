"""Confusion-matrix accumulation and PASCAL VOC style intersection over union."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.int64)


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, ignore_index=255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = _to_numpy(pred), _to_numpy(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != self.ignore_index
        p, g = pred[keep], gt[keep]
        c = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= c):
            raise ValueError("ground truth has class indices outside [0, num_classes)")
        if p.size and (p.min() < 0 or p.max() >= c):
            raise ValueError("prediction has class indices outside [0, num_classes)")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update_confusion(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


@dataclass
class IoUResult:
    per_class: np.ndarray  # nan where the class never occurs
    mean: float  # nan when no class occurs at all

    @property
    def defined(self) -> bool:
        return not np.isnan(self.mean)


def mean_iou(cm: ConfusionMatrix | np.ndarray, absent_as_zero=False) -> IoUResult:
    """Per-class ``TP / (TP + FP + FN)`` and their unweighted mean.

    Classes with an empty denominator are left out of the mean unless
    ``absent_as_zero`` is set.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(0) + counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    if absent_as_zero:
        iou = np.nan_to_num(iou, nan=0.0)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return IoUResult(iou, mean)
