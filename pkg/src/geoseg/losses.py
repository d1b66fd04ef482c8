"""Supervised cross-entropy, geometric consistency, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import IGNORE, Frame
from .geometry import DEFAULT_OCCL_THRESHOLD, Intrinsics
from .tensor import ShapeError, Tensor, _emit, _log_branch, add, detach, mul, no_grad, select
from .warp import warp_probabilities

PROB_FLOOR = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.1
    class_weights: Optional[Sequence[float]] = None
    neighbor_count: int = 3
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")


EMPTY_SUPERVISION = "empty-supervision"


def is_empty_supervision(loss: Tensor) -> bool:
    return loss.name == EMPTY_SUPERVISION


def cross_entropy(pred: Tensor, target: np.ndarray, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Mean over annotated pixels of ``-w[label] * log(max(p[label], 1e-7))``.

    ``pred`` is [C,H,W] or [B,C,H,W]; ``target`` matches without the class
    axis. The mean divides by the pixel count, not the weight sum. An
    all-IGNORE target yields a zero loss flagged by
    :func:`is_empty_supervision`.
    """
    target = np.asarray(target)
    batched = pred.data.ndim == 4
    probs = pred.data if batched else pred.data[None]
    labels = target if batched else target[None]
    B, C, H, W = probs.shape
    if labels.shape != (B, H, W):
        raise ShapeError(f"label extents {target.shape} do not match prediction {pred.shape}")
    ok = labels != IGNORE
    if np.any(labels[ok] >= C):
        raise ShapeError(f"label {labels[ok].max()} out of range for {C} classes")
    weights = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (C,):
        raise ShapeError(f"need {C} class weights, got {weights.shape}")

    n = int(ok.sum())
    dtype = pred.dtype
    if n == 0:
        out = _emit("cross_entropy", (pred,), np.zeros((), dtype=dtype), lambda g: (np.zeros_like(pred.data),))
        out.name = EMPTY_SUPERVISION
        return out
    b, y, x = np.nonzero(ok)
    cls = labels[ok].astype(np.int64)
    p = probs[b, cls, y, x]
    w = weights[cls].astype(dtype)
    clamped = p < PROB_FLOOR
    _log_branch(clamped)
    pc = np.maximum(p, PROB_FLOOR)
    value = np.asarray((-w * np.log(pc)).sum() / n, dtype=dtype)

    def backward(g):
        gp = np.zeros(probs.shape, dtype=dtype)
        gp[b, cls, y, x] = np.where(clamped, 0.0, -w / pc) * (g / n)
        return (gp if batched else gp[0],)

    return _emit("cross_entropy", (pred,), value, backward)


def masked_l1(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of |a - b| over masked pixels and all channels; zero on an empty mask."""
    if a.shape != b.shape or a.data.ndim != 3 or mask.shape != a.shape[1:]:
        raise ShapeError("masked_l1 expects two [C,H,W] tensors and an [H,W] mask")
    C = a.shape[0]
    n = int(mask.sum()) * C
    dtype = a.dtype
    if n == 0:
        z = lambda g: (np.zeros_like(a.data), np.zeros_like(b.data))  # noqa: E731
        return _emit("masked_l1", (a, b), np.zeros((), dtype=dtype), z)
    diff = (a.data - b.data) * mask
    value = np.asarray(np.abs(diff).sum() / n, dtype=dtype)
    sgn = np.sign(diff).astype(dtype)
    _log_branch(sgn)

    def backward(g):
        ga = sgn * (g / n)
        return ga, -ga

    return _emit("masked_l1", (a, b), value, backward)


def geometric_consistency(
    student_pred: Tensor,
    teacher_pred: Tensor,
    teacher_frame: Frame,
    student_frame: Frame,
    K: Intrinsics,
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD,
) -> Tensor:
    """ℓ1 gap between the student's prediction and the teacher's, warped into the student view.

    The teacher is detached, so only ``student_pred`` receives gradient.
    """
    warped, mask = warp_probabilities(detach(teacher_pred), student_frame, teacher_frame, K, occl_threshold)
    return masked_l1(student_pred, warped, mask)


def combine(supervised: Tensor, consistency: Sequence[Tensor], lam: float) -> Tensor:
    """``L_S + lam * sum(consistency terms)``; with ``lam == 0`` returns ``L_S`` unchanged."""
    if lam == 0 or not consistency:
        return supervised
    lg = consistency[0]
    for term in consistency[1:]:
        lg = add(lg, term)
    return add(supervised, mul(lg, lam))


@dataclass
class SupervisedBatch:
    images: np.ndarray  # B x 3 x H x W network inputs
    labels: np.ndarray  # B x H x W, manual or propagated, IGNORE where unknown


@dataclass
class ConsistencyBatch:
    """An anchor frame and neighbors drawn from its sequence."""

    anchor: Frame
    anchor_image: np.ndarray  # 3 x H x W
    neighbors: list[Frame]
    neighbor_images: np.ndarray  # N x 3 x H x W
    intrinsics: Intrinsics


@dataclass
class LossTerms:
    total: Tensor
    supervised: Tensor
    consistency: list[Tensor]

    @property
    def consistency_value(self) -> float:
        return float(sum(float(t.data) for t in self.consistency))


def _groups(consistency_batch) -> list[ConsistencyBatch]:
    if consistency_batch is None:
        return []
    if isinstance(consistency_batch, ConsistencyBatch):
        return [consistency_batch]
    return list(consistency_batch)


def loss_terms(supervised_batch: SupervisedBatch, consistency_batch, net, config: LossConfig) -> LossTerms:
    """Forward pass plus both loss terms for one training step.

    ``consistency_batch`` is one :class:`ConsistencyBatch`, a list of them,
    or None. Anchors ride in the same forward pass as the supervised images
    with all-IGNORE targets, so they add nothing to the supervised mean.
    Neighbors are teachers: they run without recording and are constants.
    """
    groups = _groups(consistency_batch) if config.lam > 0 else []
    images, labels = supervised_batch.images, supervised_batch.labels
    B = len(images)
    if groups:
        images = np.concatenate([images, np.stack([g.anchor_image for g in groups])])
        labels = np.concatenate([labels, np.full((len(groups),) + labels.shape[1:], IGNORE, dtype=labels.dtype)])
    probs = net(Tensor(images, dtype=net.dtype))
    ls = cross_entropy(probs, labels, config.class_weights)
    terms = []
    for gi, g in enumerate(groups):
        student = select(probs, B + gi)
        with no_grad():
            teachers = net(Tensor(g.neighbor_images, dtype=net.dtype)).data
        for frame, teacher in zip(g.neighbors, teachers):
            terms.append(geometric_consistency(student, Tensor(teacher), frame, g.anchor, g.intrinsics, config.occl_threshold))
    return LossTerms(combine(ls, terms, config.lam), ls, terms)


def total_loss(supervised_batch: SupervisedBatch, consistency_batch, net, config: LossConfig) -> Tensor:
    """``L_S + lam * L_G`` where L_G sums the consistency term over the sampled neighbors."""
    return loss_terms(supervised_batch, consistency_batch, net, config).total
