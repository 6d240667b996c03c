from typing import Optional

import numpy as np
import torch

from app.core.exceptions import ShapeException, UndefinedMetricException
from app.schemas.data import ConfusionMatrix, IoUResult


def confusion_matrix(pred: torch.Tensor, gt: torch.Tensor, num_classes: int, ignore_index: int = 255) -> ConfusionMatrix:
    """
    Count (ground truth, prediction) pairs over non-ignore pixels

    Args:
        pred: Predicted class map
        gt: Ground-truth class map, same shape, ignore_index for unlabeled pixels
        num_classes: Number of classes
        ignore_index: Label value excluded from counting

    Returns:
        ConfusionMatrix with rows = ground truth, cols = prediction
    """
    if pred.shape != gt.shape:
        raise ShapeException(f"Prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ in shape")

    gt_flat = gt.reshape(-1).long()
    pred_flat = pred.reshape(-1).long()
    valid = gt_flat != ignore_index
    index = gt_flat[valid] * num_classes + pred_flat[valid]
    counts = torch.bincount(index, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts=counts.tolist())


def miou(cm: ConfusionMatrix) -> IoUResult:
    """
    Per-class IoU = TP / (TP + FP + FN), mean over classes with a nonempty union

    Raises:
        UndefinedMetricException: If every class union is empty
    """
    counts = cm.array
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn

    per_class: list[Optional[float]] = [
        float(tp[c] / union[c]) if union[c] > 0 else None for c in range(cm.num_classes)
    ]
    defined = [value for value in per_class if value is not None]
    if not defined:
        raise UndefinedMetricException("mIoU is undefined: no class appears in prediction or ground truth")

    total = counts.sum()
    return IoUResult(
        per_class=per_class,
        mean=float(np.mean(defined)),
        pixel_accuracy=float(tp.sum() / total) if total > 0 else None,
    )
