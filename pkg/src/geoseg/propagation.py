"""Transfer manual annotations to unlabeled frames of the same sequence."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .data import IGNORE, Frame
from .geometry import DEFAULT_OCCL_THRESHOLD, Intrinsics
from .warp import SequenceMismatch, frame_correspondence


def warp_annotation(
    source: Frame, target: Frame, K: Intrinsics, occl_threshold: float = DEFAULT_OCCL_THRESHOLD
) -> np.ndarray:
    """Nearest-neighbor read of the source labels through the correspondence field."""
    if source.annotation is None:
        raise ValueError(f"source frame {source.key} has no annotation")
    coords = frame_correspondence(target, source, K, occl_threshold)
    out = np.full(target.shape, IGNORE, dtype=np.uint8)
    ok = coords.valid
    xs = np.rint(coords.u[ok]).astype(np.int64)
    ys = np.rint(coords.v[ok]).astype(np.int64)
    out[ok] = source.annotation[ys, xs]
    return out


def accumulate_votes(votes: Optional[np.ndarray], labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Add one frame's labels to a (H, W, C) vote grid."""
    if votes is None:
        votes = np.zeros(labels.shape + (num_classes,), dtype=np.int32)
    ok = labels != IGNORE
    if np.any(labels[ok] >= num_classes):
        raise ValueError("label outside class range")
    ys, xs = np.nonzero(ok)
    votes[ys, xs, labels[ok].astype(np.int64)] += 1
    return votes


def merge_votes(votes: np.ndarray, rng_seed) -> np.ndarray:
    """Most frequent class per pixel; ties broken uniformly with a seeded generator."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    votes = np.asarray(votes)
    top = votes.max(axis=-1)
    is_max = (votes == top[..., None]) & (top[..., None] > 0)
    n_tied = is_max.sum(axis=-1)
    out = np.where(top > 0, votes.argmax(axis=-1), IGNORE).astype(np.uint8)

    tie = np.flatnonzero(n_tied > 1)
    if tie.size:
        flat = is_max.reshape(-1, votes.shape[-1])[tie]
        pick = rng.integers(0, n_tied.ravel()[tie])
        # index of the pick-th tied class per pixel
        rank = np.cumsum(flat, axis=1) - 1
        chosen = np.argmax(flat & (rank == pick[:, None]), axis=1)
        out.reshape(-1)[tie] = chosen
    return out


@dataclass
class PropagationResult:
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    coverage: dict[str, float] = field(default_factory=dict)

    @property
    def uncovered(self) -> list[str]:
        return [k for k, c in self.coverage.items() if c == 0.0]


def _frame_seed(master_seed: int, frame: Frame) -> np.random.SeedSequence:
    key = [ord(ch) for ch in frame.sequence] + [frame.index]
    return np.random.SeedSequence([int(master_seed)] + key)


def propagate_frame(
    labeled: list[Frame], target: Frame, K: Intrinsics, num_classes: int, occl_threshold: float, seed: int
) -> np.ndarray:
    votes = None
    for src in labeled:
        votes = accumulate_votes(votes, warp_annotation(src, target, K, occl_threshold), num_classes)
    if votes is None:
        return np.full(target.shape, IGNORE, dtype=np.uint8)
    return merge_votes(votes, np.random.default_rng(_frame_seed(seed, target)))


def propagate_sequence(
    labeled: Iterable[Frame],
    unlabeled: Iterable[Frame],
    K: Intrinsics,
    num_classes: int,
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD,
    rng_seed: int = 0,
    workers: int = 1,
) -> PropagationResult:
    """Vote-merged annotations for every unlabeled frame.

    The tie-break generator is derived per frame from ``rng_seed`` so the
    result does not depend on ``workers``.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    seqs = {f.sequence for f in labeled + unlabeled}
    if len(seqs) > 1:
        raise SequenceMismatch(f"propagate_sequence got frames from several sequences: {sorted(seqs)}")

    def one(frame):
        return propagate_frame(labeled, frame, K, num_classes, occl_threshold, rng_seed)

    if workers > 1 and len(unlabeled) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(one, unlabeled))
    else:
        maps = [one(f) for f in unlabeled]

    result = PropagationResult()
    for f, m in zip(unlabeled, maps):
        result.labels[f.key] = m
        result.coverage[f.key] = float(np.mean(m != IGNORE))
    return result


def propagate_dataset(frames: Iterable[Frame], K: Intrinsics, num_classes: int, occl_threshold: float = DEFAULT_OCCL_THRESHOLD, rng_seed: int = 0, workers: int = 1) -> PropagationResult:
    """Run :func:`propagate_sequence` over every sequence of the training frames."""
    by_seq: dict[str, list[Frame]] = {}
    for f in frames:
        by_seq.setdefault(f.sequence, []).append(f)
    out = PropagationResult()
    for seq in sorted(by_seq):
        fs = by_seq[seq]
        r = propagate_sequence(
            [f for f in fs if f.labeled], [f for f in fs if not f.labeled], K, num_classes, occl_threshold, rng_seed, workers
        )
        out.labels.update(r.labels)
        out.coverage.update(r.coverage)
    return out
