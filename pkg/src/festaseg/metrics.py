"""Confusion-matrix evaluation: per-class F1, mean F1 and overall accuracy."""

from __future__ import annotations

import numpy as np

from .annotations import UNLABELED
from .errors import ScoreError, ShapeError, ValidationError


def accumulate(gt: np.ndarray, pred: np.ndarray, num_classes: int, exclude=(),
               cm: np.ndarray | None = None) -> np.ndarray:
    """Add pixel counts to ``cm[gt, pred]``; unlabeled and excluded ground truth is skipped."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    keep = gt != UNLABELED
    for c in exclude:
        keep &= gt != c
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if len(g) and (g.max() >= num_classes or p.max() >= num_classes):
        raise ValidationError(f"class id out of range for {num_classes} classes")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    counts = counts.reshape(num_classes, num_classes)
    if cm is None:
        return counts.astype(np.int64)
    return cm + counts


def scores(cm) -> tuple[np.ndarray, float, float]:
    """``(per-class F1, mean F1, OA)``.

    F1 is 0 where its denominator is 0.  The mean runs over classes that occur
    in the ground truth or in the prediction.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise ScoreError("confusion matrix is empty; nothing was evaluated")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    return f1, float(f1[present].mean()), float(tp.sum() / total)


def report(cm, class_names=None) -> dict:
    f1, mean_f1, oa = scores(cm)
    names = class_names or [str(c) for c in range(len(f1))]
    return {"f1": {n: float(v) for n, v in zip(names, f1)}, "mean_f1": mean_f1, "oa": oa}


def format_table(rep: dict) -> str:
    lines = ["class   F1"]
    lines += [f"{name:<7} {value:.4f}" for name, value in rep["f1"].items()]
    lines.append(f"mean F1 {rep['mean_f1']:.4f}")
    lines.append(f"OA      {rep['oa']:.4f}")
    return "\n".join(lines)
