"""Confusion-matrix IoU for label maps."""

from __future__ import annotations

import numpy as np

IGNORE = 255


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE) -> np.ndarray:
    """``cm[i, j]`` counts pixels of ground-truth class ``i`` predicted as ``j``."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and label sizes differ: {pred.size} vs {gt.size}")
    keep = (gt != ignore) & (gt >= 0) & (gt < num_classes)
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes absent from the ground truth."""
    inter = np.diag(cm).astype(float)
    gt_count = cm.sum(axis=1).astype(float)
    union = gt_count + cm.sum(axis=0) - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    iou[gt_count == 0] = np.nan
    return iou


def mean_iou(pred, gt, num_classes: int, ignore: int = IGNORE) -> float:
    """Unweighted mean IoU over the classes that occur in ``gt``."""
    iou = iou_per_class(confusion_matrix(pred, gt, num_classes, ignore))
    present = ~np.isnan(iou)
    return float(iou[present].mean()) if present.any() else float("nan")
