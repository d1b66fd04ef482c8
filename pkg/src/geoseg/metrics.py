"""Segmentation accuracy and Intersection-over-Union.

Accuracy is the per-image ratio of correct to annotated pixels, averaged
over images. IoU is accumulated dataset-wide in a confusion matrix and then
computed per class; the mean skips classes absent from both prediction and
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import IGNORE


class MetricError(ValueError):
    pass


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """(C, C) counts, row = ground truth, column = prediction; IGNORE truth skipped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction {pred.shape} and truth {truth.shape} extents differ")
    ok = truth != IGNORE
    t = truth[ok].astype(np.int64)
    p = pred[ok].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise MetricError("label outside class range")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def accuracy(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    ratios = []
    for p, t in zip(preds, truths, strict=True):
        if np.shape(p) != np.shape(t):
            raise MetricError("prediction and truth extents differ")
        ok = np.asarray(t) != IGNORE
        n = int(ok.sum())
        if n:
            ratios.append(float(np.sum(np.asarray(p)[ok] == np.asarray(t)[ok])) / n)
    if not ratios:
        raise MetricError("no image has any valid annotation")
    return float(np.mean(ratios))


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN where the class is absent from both
    mean: float
    confusion: np.ndarray


def iou_from_confusion(cm: np.ndarray) -> IoUResult:
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per = np.full(len(tp), np.nan)
    present = denom > 0
    per[present] = tp[present] / denom[present]
    mean = float(np.mean(per[present])) if present.any() else float("nan")
    return IoUResult(per_class=per, mean=mean, confusion=cm)


def iou(preds: Iterable[np.ndarray], truths: Iterable[np.ndarray], num_classes: int) -> IoUResult:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, truths, strict=True):
        cm += confusion_matrix(p, t, num_classes)
    return iou_from_confusion(cm)


def evaluate(preds, truths, num_classes: int) -> dict:
    """Both metrics as a flat report dict."""
    preds, truths = list(preds), list(truths)
    res = iou(preds, truths, num_classes)
    out = {"accuracy": accuracy(preds, truths), "mean_iou": res.mean}
    for c, v in enumerate(res.per_class):
        out[f"iou_{c}"] = None if np.isnan(v) else float(v)
    return out
