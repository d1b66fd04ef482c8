"""Differentiable warping of per-class probability maps between views."""

from __future__ import annotations

import numpy as np

from .data import Frame
from .geometry import (
    DEFAULT_OCCL_THRESHOLD,
    CorrespondenceField,
    GeometryError,
    Intrinsics,
    bilinear_corners,
    compute_correspondence,
    relative_transform,
)
from .tensor import ShapeError, Tensor, _emit


class SequenceMismatch(ValueError):
    pass


def bilinear_sample(maps: Tensor, coords: CorrespondenceField) -> tuple[Tensor, np.ndarray]:
    """Gather ``maps`` [C,Hs,Ws] at continuous source coordinates.

    Output has the target extents; invalid pixels are exactly zero.
    Gradients flow to ``maps`` only (coordinates are fixed inputs).
    """
    if maps.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects maps [C,H,W], got {maps.shape}")
    C, hs, ws = maps.shape
    if coords.valid.shape != (hs, ws):
        raise ShapeError(f"correspondence extents {coords.valid.shape} do not match maps {(hs, ws)}")
    ht, wt = coords.valid.shape
    valid = coords.valid
    vi = np.flatnonzero(valid)
    x0, y0, a, b = bilinear_corners(coords.u.ravel()[vi], coords.v.ravel()[vi], ws, hs)
    dtype = maps.dtype
    idx = np.concatenate([y0 * ws + x0, y0 * ws + x0 + 1, (y0 + 1) * ws + x0, (y0 + 1) * ws + x0 + 1])
    wts = np.concatenate([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]).astype(dtype)
    n = vi.size

    src = maps.data.reshape(C, hs * ws)
    gathered = src[:, idx] * wts
    out = np.zeros((C, ht * wt), dtype=dtype)
    out[:, vi] = gathered[:, :n] + gathered[:, n : 2 * n] + gathered[:, 2 * n : 3 * n] + gathered[:, 3 * n :]
    out = out.reshape(C, ht, wt)

    def backward(g):
        gv = g.reshape(C, ht * wt)[:, vi]
        gv4 = np.tile(gv, 4) * wts
        gm = np.stack([np.bincount(idx, weights=gv4[c], minlength=hs * ws) for c in range(C)])
        return (gm.reshape(C, hs, ws).astype(dtype, copy=False),)

    return _emit("bilinear_sample", (maps,), out, backward), valid.copy()


def frame_correspondence(
    target: Frame, source: Frame, K: Intrinsics, occl_threshold: float = DEFAULT_OCCL_THRESHOLD
) -> CorrespondenceField:
    if target.sequence != source.sequence:
        raise SequenceMismatch(
            f"frames {target.key} and {source.key} belong to different sequences; no registration between them"
        )
    if target.shape != K.shape or source.shape != K.shape:
        raise GeometryError("frame extents do not match intrinsics")
    motion = relative_transform(target.pose, source.pose)
    return compute_correspondence(target.depth, K, motion, source.depth, occl_threshold)


def warp_probabilities(
    source_pred: Tensor,
    target_frame: Frame,
    source_frame: Frame,
    K: Intrinsics,
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD,
) -> tuple[Tensor, np.ndarray]:
    """Warp the source view's class probabilities into the target view.

    The returned mask marks exactly the pixels that may enter a consistency
    loss: depth present, in bounds after the warp, and not occluded.
    """
    coords = frame_correspondence(target_frame, source_frame, K, occl_threshold)
    return bilinear_sample(source_pred, coords)
