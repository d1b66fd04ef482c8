"""Pinhole camera model, rigid motions and target-to-source correspondences.

Conventions: pixel centers sit at integer coordinates with the origin at the
top-left, the camera looks down +z, x points right and y down. Poses are
camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6
DEFAULT_OCCL_THRESHOLD = 0.05
BOUNDS_EPS = 1e-6  # pixels; absorbs round-off of coordinates that land on the image border


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u, v

    def rays(self) -> np.ndarray:
        """K^-1 p for every pixel, shape (H, W, 3) with z = 1."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("rigid transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError(f"rotation determinant {np.linalg.det(r):.6f} != +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - [0, 0, 0, 1]).max() > ORTHO_TOL:
            raise GeometryError("last pose row must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose at ``eye`` looking at ``target`` (y axis points down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        raise GeometryError("look_at: view direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)


def relative_transform(pose_target: RigidTransform, pose_source: RigidTransform) -> RigidTransform:
    """Motion taking target-camera coordinates into source-camera coordinates."""
    return pose_source.inverse().compose(pose_target)


@dataclass
class CorrespondenceField:
    """Per target pixel: source coordinates, transformed depth and validity."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def _check_depth(depth: np.ndarray, K: Intrinsics, what: str) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != K.shape:
        raise GeometryError(f"{what} has extents {depth.shape}, intrinsics say {K.shape}")
    return depth


def bilinear_corners(u: np.ndarray, v: np.ndarray, width: int, height: int):
    """Top-left neighbor indices and fractional offsets for in-bounds coordinates.

    The top-left corner is clamped so that the 2x2 stencil stays inside the
    image; a coordinate on the last row/column then gets offset 1.
    """
    x0 = np.clip(np.floor(u), 0, width - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, height - 2).astype(np.int64)
    return x0, y0, u - x0, v - y0


def sample_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth at (u, v); ``ok`` is False if any of the 4 neighbors lacks depth."""
    h, w = depth.shape
    x0, y0, a, b = bilinear_corners(u, v, w, h)
    d00 = depth[y0, x0]
    d01 = depth[y0, x0 + 1]
    d10 = depth[y0 + 1, x0]
    d11 = depth[y0 + 1, x0 + 1]
    ok = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    val = (1 - b) * ((1 - a) * d00 + a * d01) + b * ((1 - a) * d10 + a * d11)
    return val, ok


def compute_correspondence(
    depth_target,
    K: Intrinsics,
    motion: RigidTransform,
    depth_source,
    occl_threshold: float = DEFAULT_OCCL_THRESHOLD,
) -> CorrespondenceField:
    """Inverse warp driven by target depth, with an occlusion test on source depth.

    Each target pixel p with depth d is mapped to ``K (R d K^-1 p + t)``; the
    third coordinate before dehomogenization is the transformed depth.
    """
    if not occl_threshold > 0:
        raise GeometryError("occl_threshold must be positive")
    dt = _check_depth(depth_target, K, "target depth")
    ds = _check_depth(depth_source, K, "source depth")

    pts = K.rays() * dt[..., None]
    q = motion.apply(pts) @ K.matrix.T
    d2 = q[..., 2]
    has = (dt > 0) & (d2 > 0)
    safe = np.where(has, d2, 1.0)
    u2 = np.where(has, q[..., 0] / safe, -1.0)
    v2 = np.where(has, q[..., 1] / safe, -1.0)
    inb = has & (u2 >= -BOUNDS_EPS) & (u2 <= K.width - 1 + BOUNDS_EPS)
    inb &= (v2 >= -BOUNDS_EPS) & (v2 <= K.height - 1 + BOUNDS_EPS)
    u2 = np.where(inb, np.clip(u2, 0, K.width - 1), u2)
    v2 = np.where(inb, np.clip(v2, 0, K.height - 1), v2)

    valid = inb.copy()
    if inb.any():
        sd, ok = sample_depth(ds, u2[inb], v2[inb])
        valid[inb] = ok & (np.abs(sd - d2[inb]) <= occl_threshold)
    return CorrespondenceField(u=u2, v=v2, depth=np.where(has, d2, 0.0), valid=valid)
