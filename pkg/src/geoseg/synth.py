"""Deterministic synthetic RGB-D sequences with ground-truth labels.

Scenes are rooms built from axis-aligned boxes and rectangles, rendered by
exact ray casting. Texture depends only on the world position of the hit
point, so every view of a surface sees the same colors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import IGNORE, Dataset, Frame
from .geometry import Intrinsics, RigidTransform, look_at

STRUCTURE_CLASSES = ("ground", "structure", "furniture", "props")
GROUND, STRUCTURE, FURNITURE, PROPS = range(4)


class SceneError(ValueError):
    pass


@dataclass
class Primitive:
    """Axis-aligned box; a rectangle is a box with zero extent along one axis."""

    lo: tuple
    hi: tuple
    cls: int
    color: tuple = (128, 128, 128)

    def __post_init__(self):
        self.lo = tuple(float(v) for v in self.lo)
        self.hi = tuple(float(v) for v in self.hi)
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise SceneError(f"primitive bounds inverted: {self.lo} > {self.hi}")

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "cls": self.cls, "color": list(self.color)}


@dataclass
class Arc:
    """Camera path on a horizontal circle, every pose looking at ``target``."""

    center: tuple
    radius: float
    height: float
    start_deg: float
    sweep_deg: float
    n: int
    target: tuple

    def poses(self) -> list[RigidTransform]:
        if self.n < 2:
            raise SceneError("a trajectory needs at least 2 poses")
        out = []
        for i in range(self.n):
            a = np.deg2rad(self.start_deg + self.sweep_deg * i / (self.n - 1))
            eye = (self.center[0] + self.radius * np.cos(a), self.center[1] + self.radius * np.sin(a), self.height)
            out.append(look_at(eye, self.target))
        return out

    def to_dict(self) -> dict:
        return dict(
            center=list(self.center), radius=self.radius, height=self.height, start_deg=self.start_deg,
            sweep_deg=self.sweep_deg, n=self.n, target=list(self.target),
        )


@dataclass
class SceneSpec:
    name: str
    seed: int
    room: tuple  # (sx, sy, sz) meters; room occupies [0, sx] x [0, sy] x [0, sz], z up
    primitives: list[Primitive]
    trajectories: dict[str, Arc]
    intrinsics: Intrinsics
    class_names: tuple = STRUCTURE_CLASSES
    checker_period: float = 0.5
    checker_contrast: float = 0.25
    noise_amplitude: float = 12.0
    depth_noise: float = 0.0
    label_noise: float = 0.0
    light: Optional[tuple] = None  # direction towards a distant light; None = unshaded
    ambient: float = 0.5
    role: str = "train"  # or "generalization"

    def __post_init__(self):
        if not self.primitives:
            raise SceneError(f"scene {self.name!r} has no primitives")
        room = np.asarray(self.room, dtype=np.float64)
        for p in self.primitives:
            if np.any(np.asarray(p.lo) < -1e-9) or np.any(np.asarray(p.hi) > room + 1e-9):
                raise SceneError(f"primitive {p.lo}-{p.hi} leaves the room {tuple(room)}")
            if not 0 <= p.cls < len(self.class_names):
                raise SceneError(f"primitive class {p.cls} out of range")
        if self.light is not None:
            light = np.asarray(self.light, dtype=np.float64)
            if light.shape != (3,) or not np.linalg.norm(light) > 0:
                raise SceneError("light must be a nonzero 3-vector")
            self.light = tuple(float(v) for v in light / np.linalg.norm(light))

    def poses(self, trajectory: str = "train") -> list[RigidTransform]:
        return self.trajectories[trajectory].poses()

    def to_dict(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "room": list(self.room),
            "primitives": [p.to_dict() for p in self.primitives],
            "trajectories": {k: a.to_dict() for k, a in self.trajectories.items()},
            "intrinsics": self.intrinsics.to_dict(), "class_names": list(self.class_names),
            "checker_period": self.checker_period, "checker_contrast": self.checker_contrast,
            "noise_amplitude": self.noise_amplitude, "depth_noise": self.depth_noise,
            "label_noise": self.label_noise, "role": self.role, "ambient": self.ambient,
            "light": None if self.light is None else list(self.light),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["primitives"] = [Primitive(**p) for p in d["primitives"]]
        d["trajectories"] = {k: Arc(**a) for k, a in d["trajectories"].items()}
        d["intrinsics"] = Intrinsics.from_dict(d["intrinsics"])
        d["room"] = tuple(d["room"])
        d["class_names"] = tuple(d.get("class_names", STRUCTURE_CLASSES))
        if d.get("light") is not None:
            d["light"] = tuple(d["light"])
        return cls(**d)


# ------------------------------------------------------------------ ray casting


def intersect_boxes(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test of N rays against M boxes.

    Returns (t_enter, axis_enter) of shape (N, M); t is inf on a miss. The
    ray parameter is scaled so that t equals camera-frame depth when
    ``dirs`` are rotated K^-1 p rays.
    """
    o = origin[None, None, :]
    d = dirs[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - o) / d
        t2 = (hi[None] - o) / d
    parallel = d == 0
    inside = (o >= lo[None]) & (o <= hi[None])
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = near.max(axis=-1)
    axis = near.argmax(axis=-1)
    t_exit = far.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9)
    return np.where(hit, t_enter, np.inf), axis


def _noise_field(points: np.ndarray, seed: int, amplitude: float) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    freqs = rng.normal(scale=2.5, size=(6, 3))
    phases = rng.uniform(0, 2 * np.pi, size=6)
    return amplitude * np.sin(points @ freqs.T + phases).mean(axis=-1) * np.sqrt(2)


def cast(spec: SceneSpec, pose: RigidTransform):
    """Depth, class label, primitive index, hit point and entry axis per pixel."""
    K = spec.intrinsics
    rays = K.rays().reshape(-1, 3) @ pose.rotation.T
    lo = np.array([p.lo for p in spec.primitives])
    hi = np.array([p.hi for p in spec.primitives])
    t, axis = intersect_boxes(pose.translation, rays, lo, hi)
    best = t.argmin(axis=1)
    rows = np.arange(len(best))
    depth = t[rows, best]
    hit = np.isfinite(depth)
    cls = np.array([p.cls for p in spec.primitives])[best]
    points = pose.translation + rays * np.where(hit, depth, 0.0)[:, None]
    H, W = K.shape
    return (
        np.where(hit, depth, 0.0).reshape(H, W),
        np.where(hit, cls, IGNORE).reshape(H, W),
        np.where(hit, best, -1).reshape(H, W),
        points.reshape(H, W, 3),
        axis[rows, best].reshape(H, W),
    )


def render_frame(spec: SceneSpec, pose_index: int, trajectory: str = "train") -> Frame:
    """Frame with color, depth and full ground truth (``truth``), no annotation."""
    poses = spec.poses(trajectory)
    if not 0 <= pose_index < len(poses):
        raise SceneError(f"pose index {pose_index} outside trajectory of {len(poses)}")
    pose = poses[pose_index]
    depth, labels, prim, points, axis = cast(spec, pose)
    hit = prim >= 0

    base = np.array([p.color for p in spec.primitives], dtype=np.float64)[np.maximum(prim, 0)]
    cells = np.floor(points / spec.checker_period).astype(np.int64)
    # the entry-face coordinate sits on a cell boundary; leave it out of the parity
    parity = (cells.sum(axis=-1) - np.take_along_axis(cells, axis[..., None], axis=-1)[..., 0]) % 2
    shade = 1.0 - spec.checker_contrast * parity
    if spec.light is not None:
        # flat Lambertian term of the entry face; its normal points back along the ray
        ray_sign = np.sign(np.take_along_axis(points - pose.translation, axis[..., None], axis=-1)[..., 0])
        cos = -ray_sign * np.asarray(spec.light)[axis]
        shade = shade * (spec.ambient + (1.0 - spec.ambient) * np.maximum(cos, 0.0))
    noise = _noise_field(points, spec.seed, spec.noise_amplitude)
    color = base * shade[..., None] + noise[..., None]
    color = np.where(hit[..., None], np.clip(np.rint(color), 0, 255), 0).astype(np.uint8)

    frame_rng = np.random.default_rng([spec.seed, sum(map(ord, trajectory)), pose_index])
    if spec.depth_noise > 0:
        depth = np.where(hit, np.maximum(depth + frame_rng.normal(scale=spec.depth_noise, size=depth.shape), 1e-3), 0.0)
    return Frame(
        color=color,
        depth=depth,
        pose=pose,
        sequence=f"{spec.name}-{trajectory}",
        index=pose_index,
        truth=labels.astype(np.uint8),
    )


def corrupt_labels(labels: np.ndarray, fraction: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Replace ``fraction`` of the labeled pixels with a different random class."""
    out = labels.copy()
    ys, xs = np.nonzero(labels != IGNORE)
    k = int(round(fraction * len(ys)))
    if k == 0:
        return out
    pick = rng.choice(len(ys), size=k, replace=False)
    shift = rng.integers(1, num_classes, size=k)
    out[ys[pick], xs[pick]] = (labels[ys[pick], xs[pick]].astype(np.int64) + shift) % num_classes
    return out


def labeled_indices(n_frames: int, labeled_fraction: float) -> list[int]:
    """Uniformly spaced annotated frame indices."""
    if not 0 < labeled_fraction <= 1:
        raise SceneError("labeled_fraction must be in (0, 1]")
    k = int(np.floor(labeled_fraction * n_frames + 1e-9))
    if k == 0:
        raise SceneError(f"labeled_fraction {labeled_fraction} leaves no annotated frame among {n_frames}")
    return sorted({int((i + 0.5) * n_frames / k) for i in range(k)})


def generate_dataset(
    specs: Sequence[SceneSpec],
    labeled_fraction: float,
    seed: int = 0,
    unannotated_sequences: bool = False,
) -> Dataset:
    """Render every scene into train / validation / test / generalization frames.

    Training scenes contribute their ``train`` trajectory (a uniformly spaced
    ``labeled_fraction`` of it annotated) plus ``validation`` and ``test``
    trajectories as alternative scans. Generalization scenes contribute
    their ``generalization`` trajectory; with ``unannotated_sequences`` their
    ``train`` trajectory also joins training with no annotation at all.
    """
    if not specs:
        raise SceneError("no scenes")
    K = specs[0].intrinsics
    names = specs[0].class_names
    ds = Dataset(intrinsics=K, class_names=list(names))
    for spec in specs:
        if spec.intrinsics != K or spec.class_names != names:
            raise SceneError("all scenes must share intrinsics and classes")
        rng = np.random.default_rng([seed, spec.seed])
        if spec.role == "train":
            n = spec.trajectories["train"].n
            keep = set(labeled_indices(n, labeled_fraction))
            for i in range(n):
                f = render_frame(spec, i, "train")
                if i in keep:
                    ann = f.truth
                    if spec.label_noise > 0:
                        ann = corrupt_labels(ann, spec.label_noise, len(names), rng)
                    f.annotation = ann
                ds.frames.append(f)
            for split in ("validation", "test"):
                if split in spec.trajectories:
                    for i in range(spec.trajectories[split].n):
                        ds.frames.append(replace(render_frame(spec, i, split), split=split))
        elif spec.role == "generalization":
            for i in range(spec.trajectories["generalization"].n):
                ds.frames.append(replace(render_frame(spec, i, "generalization"), split="generalization"))
            if unannotated_sequences and "train" in spec.trajectories:
                for i in range(spec.trajectories["train"].n):
                    ds.frames.append(render_frame(spec, i, "train"))
        else:
            raise SceneError(f"unknown scene role {spec.role!r}")
    return ds


# ----------------------------------------------------------------- benchmark

PALETTE = {
    GROUND: ((125, 105, 85), 35),
    STRUCTURE: ((170, 165, 150), 35),
    FURNITURE: ((135, 100, 75), 45),
    PROPS: ((150, 140, 130), 90),
}


def desk_intrinsics(size: int = 64) -> Intrinsics:
    f = 0.75 * size
    return Intrinsics(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)


def _color(rng: np.random.Generator, cls: int) -> tuple:
    base, spread = PALETTE[cls]
    return tuple(int(np.clip(c + rng.uniform(-spread, spread), 0, 255)) for c in base)


def random_room(
    name: str,
    seed: int,
    intrinsics: Optional[Intrinsics] = None,
    role: str = "train",
    n_frames: int = 30,
    n_heldout: int = 8,
    room: tuple = (6.0, 6.0, 3.0),
) -> SceneSpec:
    """A room with floor, walls, ceiling, furniture boxes and props.

    The training arc sweeps 120 degrees around the room center; held-out
    arcs cover the same angular range at a different radius and height, so
    they are alternative scans rather than repeats of training poses.
    """
    rng = np.random.default_rng(seed)
    K = intrinsics or desk_intrinsics()
    sx, sy, sz = room
    cx, cy = sx / 2, sy / 2
    prims = [Primitive((0, 0, 0), (sx, sy, 0), GROUND, _color(rng, GROUND))]
    prims += [
        Primitive((0, 0, 0), (0, sy, sz), STRUCTURE, _color(rng, STRUCTURE)),
        Primitive((sx, 0, 0), (sx, sy, sz), STRUCTURE, _color(rng, STRUCTURE)),
        Primitive((0, 0, 0), (sx, 0, sz), STRUCTURE, _color(rng, STRUCTURE)),
        Primitive((0, sy, 0), (sx, sy, sz), STRUCTURE, _color(rng, STRUCTURE)),
        Primitive((0, 0, sz), (sx, sy, sz), STRUCTURE, _color(rng, STRUCTURE)),
    ]
    # a pillar or wall segment keeps structure from being only the outer shell
    px, py = rng.uniform(0.6, sx - 1.0), rng.choice([0.0, sy - 0.4])
    prims.append(Primitive((px, py, 0), (px + 0.4, py + 0.4, sz), STRUCTURE, _color(rng, STRUCTURE)))

    tops = []
    for _ in range(rng.integers(3, 5)):
        w, d, h = rng.uniform(0.5, 1.3), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)
        x0 = rng.uniform(cx - 1.3, cx + 1.3 - w)
        y0 = rng.uniform(cy - 1.3, cy + 1.3 - d)
        prims.append(Primitive((x0, y0, 0), (x0 + w, y0 + d, h), FURNITURE, _color(rng, FURNITURE)))
        tops.append((x0, y0, w, d, h))
    for _ in range(rng.integers(6, 10)):
        s = rng.uniform(0.2, 0.45, size=3)
        if tops and rng.uniform() < 0.7:
            x0, y0, w, d, h = tops[rng.integers(len(tops))]
            px = rng.uniform(x0, x0 + max(w - s[0], 1e-3))
            py = rng.uniform(y0, y0 + max(d - s[1], 1e-3))
            pz = h
        else:
            px = rng.uniform(cx - 1.6, cx + 1.6 - s[0])
            py = rng.uniform(cy - 1.6, cy + 1.6 - s[1])
            pz = 0.0
        prims.append(Primitive((px, py, pz), (px + s[0], py + s[1], pz + s[2]), PROPS, _color(rng, PROPS)))

    start = rng.uniform(0, 360)
    target = (cx, cy, 0.4)
    arcs = {}
    if role == "train":
        arcs["train"] = Arc((cx, cy), 2.5, 1.6, start, 120.0, n_frames, target)
        arcs["validation"] = Arc((cx, cy), 2.3, 1.35, start + 5, 110.0, n_heldout, target)
        arcs["test"] = Arc((cx, cy), 2.65, 1.85, start + 10, 100.0, n_heldout, target)
    else:
        arcs["train"] = Arc((cx, cy), 2.5, 1.6, start, 120.0, n_frames, target)
        arcs["generalization"] = Arc((cx, cy), 2.4, 1.5, start + 7, 105.0, n_heldout, target)
    az, el = np.deg2rad(rng.uniform(0, 360)), np.deg2rad(rng.uniform(35, 65))
    light = (np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el))
    return SceneSpec(name=name, seed=seed, room=room, primitives=prims, trajectories=arcs, intrinsics=K, role=role,
                     light=light, ambient=0.45)
