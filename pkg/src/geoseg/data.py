"""In-memory dataset model: frames, label maps and split bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .geometry import Intrinsics, RigidTransform

IGNORE = 255
SPLITS = ("train", "validation", "test", "generalization")


@dataclass
class Frame:
    """One registered RGB-D sample.

    ``annotation`` is what training may use (manual labels, or None);
    ``truth`` is full ground truth, only present for evaluation splits and
    synthetic data and never read by the trainer.
    """

    color: np.ndarray  # H x W x 3 uint8
    depth: np.ndarray  # H x W float meters, 0 = missing
    pose: RigidTransform  # camera-to-world
    sequence: str
    index: int
    annotation: Optional[np.ndarray] = None  # H x W uint8, IGNORE = 255
    truth: Optional[np.ndarray] = None
    split: str = "train"

    @property
    def key(self) -> str:
        return f"{self.sequence}/{self.index:04d}"

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def labeled(self) -> bool:
        return self.annotation is not None

    def with_annotation(self, annotation: Optional[np.ndarray]) -> "Frame":
        return replace(self, annotation=annotation)


@dataclass
class Dataset:
    intrinsics: Intrinsics
    class_names: list[str]
    frames: list[Frame] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    @property
    def labeled(self) -> list[Frame]:
        """The manually annotated training frames (the set S)."""
        return [f for f in self.split("train") if f.labeled]

    @property
    def unlabeled(self) -> list[Frame]:
        """Training frames without manual annotation (the set U)."""
        return [f for f in self.split("train") if not f.labeled]

    def sequences(self, frames: Optional[Iterable[Frame]] = None) -> dict[str, list[Frame]]:
        out: dict[str, list[Frame]] = {}
        for f in self.frames if frames is None else frames:
            out.setdefault(f.sequence, []).append(f)
        return out


def color_to_input(color: np.ndarray, dtype=np.float32) -> np.ndarray:
    """HxWx3 uint8 -> 3xHxW float in [-0.5, 0.5]."""
    return (np.asarray(color, dtype=dtype).transpose(2, 0, 1) / 255.0 - 0.5).astype(dtype)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """CxHxW one-hot; IGNORE pixels get all zeros."""
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = labels == c
    return out
