import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoseg.geometry import (
    DEFAULT_OCCL_THRESHOLD,
    GeometryError,
    Intrinsics,
    RigidTransform,
    compute_correspondence,
    look_at,
    relative_transform,
    sample_depth,
)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


def translation(x, y=0.0, z=0.0):
    return RigidTransform(np.eye(3), [x, y, z])


# --------------------------------------------------------- rigid transforms


def test_relative_transform_of_same_pose_is_identity(rng):
    p = random_pose(rng)
    m = relative_transform(p, p).matrix
    np.testing.assert_allclose(m, np.eye(4), atol=1e-12)


def test_relative_transform_pure_translation():
    m = relative_transform(RigidTransform.identity(), translation(0.1))
    np.testing.assert_allclose(m.translation, [-0.1, 0, 0])
    np.testing.assert_array_equal(m.rotation, np.eye(3))


@pytest.mark.parametrize("seed", range(10))
def test_relative_transform_matches_compose_via_world(seed):
    rng = np.random.default_rng(seed)
    pt, ps = random_pose(rng), random_pose(rng)
    x = rng.normal(size=(5, 3))
    world = x @ pt.rotation.T + pt.translation
    via_world = (world - ps.translation) @ ps.rotation
    np.testing.assert_allclose(relative_transform(pt, ps).apply(x), via_world, atol=1e-9)


def test_rigid_transform_inverse_roundtrip(rng):
    p = random_pose(rng)
    np.testing.assert_allclose((p.compose(p.inverse())).matrix, np.eye(4), atol=1e-12)


@pytest.mark.parametrize(
    "rotation",
    [np.diag([1.0, 1.0, -1.0]), 2 * np.eye(3), np.array([[1, 0.1, 0], [0, 1, 0], [0, 0, 1.0]])],
    ids=["reflection", "scaled", "sheared"],
)
def test_rigid_transform_rejects_non_rotations(rotation):
    with pytest.raises(GeometryError):
        RigidTransform(rotation, np.zeros(3))


def test_rigid_transform_rejects_nan():
    with pytest.raises(GeometryError):
        RigidTransform(np.eye(3), [0, np.nan, 0])


def test_from_matrix_checks_last_row():
    m = np.eye(4)
    m[3, 0] = 1
    with pytest.raises(GeometryError):
        RigidTransform.from_matrix(m)
    with pytest.raises(GeometryError):
        RigidTransform.from_matrix(np.eye(3))


def test_look_at_points_optical_axis_at_target():
    pose = look_at((1.0, -3.0, 2.0), (0.0, 0.0, 0.5))
    z = pose.rotation[:, 2]
    d = np.array([-1.0, 3.0, -1.5])
    np.testing.assert_allclose(z, d / np.linalg.norm(d), atol=1e-12)
    # image y axis points down in the world
    assert pose.rotation[2, 1] < 0


# --------------------------------------------------------------- intrinsics


@pytest.mark.parametrize(
    "kwargs",
    [dict(fx=0.0), dict(fy=-1.0), dict(cx=0.0), dict(cy=9.0)],
)
def test_intrinsics_validation(kwargs):
    base = dict(fx=7.0, fy=7.0, cx=3.5, cy=3.5, width=8, height=8)
    with pytest.raises(GeometryError):
        Intrinsics(**(base | kwargs))


def test_rays_have_unit_z_and_center_on_axis():
    K = Intrinsics(10.0, 10.0, 2.0, 1.0, 5, 3)
    r = K.rays()
    assert r.shape == (3, 5, 3)
    np.testing.assert_array_equal(r[..., 2], 1.0)
    np.testing.assert_array_equal(r[1, 2], [0, 0, 1])


# ----------------------------------------------------------- correspondence


def flat_depth(K, d):
    return np.full(K.shape, d)


def test_identity_motion_maps_every_pixel_to_itself(K32):
    depth = flat_depth(K32, 2.0)
    c = compute_correspondence(depth, K32, RigidTransform.identity(), depth)
    u, v = K32.pixel_grid()
    np.testing.assert_allclose(c.u, u, atol=1e-9)
    np.testing.assert_allclose(c.v, v, atol=1e-9)
    assert c.valid.all()
    np.testing.assert_allclose(c.depth, 2.0)


def test_fronto_parallel_translation_matches_disparity():
    K = Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
    depth = flat_depth(K, 2.0)
    motion = relative_transform(RigidTransform.identity(), translation(0.1))
    c = compute_correspondence(depth, K, motion, depth)
    u, v = K.pixel_grid()
    assert np.abs(c.u - (u - 5.0)).max() < 1e-4
    np.testing.assert_allclose(c.v, v, atol=1e-9)
    # columns that leave the image are invalid, the rest are valid
    np.testing.assert_array_equal(c.valid, u - 5.0 >= 0)


@settings(max_examples=40, deadline=None)
@given(
    fx=st.floats(20, 200),
    tx=st.floats(-0.3, 0.3),
    d=st.floats(0.5, 5.0),
)
def test_disparity_closed_form_property(fx, tx, d):
    K = Intrinsics(fx, fx, 15.5, 11.5, 32, 24)
    depth = flat_depth(K, d)
    c = compute_correspondence(depth, K, relative_transform(RigidTransform.identity(), translation(tx)), depth)
    u, _ = K.pixel_grid()
    assert np.abs(c.u - (u - fx * tx / d)).max() < 1e-4


def test_transformed_depth_is_third_coordinate(rng, K32):
    depth = rng.uniform(1.0, 3.0, size=K32.shape)
    motion = RigidTransform(look_at((0, 0, 0), (0.1, 1.0, 0.05)).rotation @ look_at((0, 0, 0), (0, 1, 0)).rotation.T, [0.05, -0.02, 0.3])
    c = compute_correspondence(depth, K32, motion, depth, occl_threshold=10.0)
    pts = motion.apply(K32.rays() * depth[..., None])
    np.testing.assert_allclose(c.depth, pts[..., 2], rtol=1e-12)


def test_missing_target_depth_is_invalid(K32):
    depth = flat_depth(K32, 2.0)
    depth[3, 4] = 0
    c = compute_correspondence(depth, K32, RigidTransform.identity(), flat_depth(K32, 2.0))
    assert not c.valid[3, 4]
    assert c.valid.sum() == K32.width * K32.height - 1


def test_missing_source_neighbor_invalidates(K32):
    src = flat_depth(K32, 2.0)
    src[10, 10] = 0
    c = compute_correspondence(flat_depth(K32, 2.0), K32, RigidTransform.identity(), src)
    # identity lands on knots; the stencil of (10, 10) and of its upper/left neighbors touches the hole
    assert not c.valid[10, 10]


def test_occlusion_by_depth_gap(K32):
    tgt = flat_depth(K32, 2.0)
    src = flat_depth(K32, 2.0)
    src[:, :16] = 1.0  # something closer covers the left half in the source view
    c = compute_correspondence(tgt, K32, RigidTransform.identity(), src)
    assert not c.valid[:, :15].any()
    assert c.valid[:, 17:].all()


def test_threshold_must_be_positive(K32):
    d = flat_depth(K32, 1.0)
    with pytest.raises(GeometryError):
        compute_correspondence(d, K32, RigidTransform.identity(), d, occl_threshold=0.0)


def test_depth_extent_mismatch(K32):
    with pytest.raises(GeometryError):
        compute_correspondence(np.ones((8, 8)), K32, RigidTransform.identity(), flat_depth(K32, 1.0))


def test_sample_depth_bilinear_value():
    depth = np.array([[1.0, 2.0], [3.0, 4.0]])
    val, ok = sample_depth(depth, np.array([0.5, 1.0]), np.array([0.5, 0.0]))
    np.testing.assert_allclose(val, [2.5, 2.0])
    assert ok.all()


@pytest.mark.parametrize("seed", range(5))
def test_validity_monotone_in_threshold(seed, room_spec):
    from geoseg.synth import render_frame

    a, b = render_frame(room_spec, seed), render_frame(room_spec, seed + 4)
    K = room_spec.intrinsics
    motion = relative_transform(a.pose, b.pose)
    masks = [compute_correspondence(a.depth, K, motion, b.depth, t).valid for t in (0.01, 0.05, 0.2, 1.0)]
    for lo, hi in zip(masks, masks[1:]):
        assert not np.any(lo & ~hi)


def test_default_threshold_value():
    assert DEFAULT_OCCL_THRESHOLD == 0.05


def test_round_trip_returns_to_the_same_pixel():
    K = Intrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    pose_t, pose_s = RigidTransform.identity(), RigidTransform(np.eye(3), [0.2, -0.1, 0.3])
    depth_t = flat_depth(K, 3.0)
    depth_s = flat_depth(K, 2.7)
    fwd = compute_correspondence(depth_t, K, relative_transform(pose_t, pose_s), depth_s)
    back = compute_correspondence(depth_s, K, relative_transform(pose_s, pose_t), depth_t)
    u, v = K.pixel_grid()
    # the plane z = 3 maps pixels affinely, so interpolate the backward field at the forward coordinates
    ok = fwd.valid
    bu = np.interp(fwd.u[ok], u[0], back.u[0])
    bv = np.interp(fwd.v[ok], v[:, 0], back.v[:, 0])
    assert ok.sum() > 500
    np.testing.assert_allclose(bu, u[ok], atol=1e-9)
    np.testing.assert_allclose(bv, v[ok], atol=1e-9)


# ------------------------------------------------------- z-buffer oracle


class RectScene:
    """Axis-aligned rectangles on planes y = c, bounded in x and z."""

    def __init__(self, rects):
        self.rects = rects  # (c, xlo, xhi, zlo, zhi)

    def zbuffer(self, K, pose):
        """Per-pixel camera-z depth of the nearest rectangle, 0 where nothing is hit."""
        out = np.zeros(K.shape)
        for y in range(K.height):
            for x in range(K.width):
                ray = pose.rotation @ np.array([(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0])
                o = pose.translation
                best = np.inf
                for c, xlo, xhi, zlo, zhi in self.rects:
                    if abs(ray[1]) < 1e-12:
                        continue
                    t = (c - o[1]) / ray[1]
                    p = o + t * ray
                    if t > 0 and xlo <= p[0] <= xhi and zlo <= p[2] <= zhi:
                        best = min(best, t)
                out[y, x] = best if np.isfinite(best) else 0.0
        return out


def visibility_oracle(K, pose_t, depth_t, pose_s, zbuf_s, threshold):
    """Scalar per-pixel visibility test of target points against the source z-buffer."""
    Kinv = np.linalg.inv(K.matrix)
    valid = np.zeros(K.shape, dtype=bool)
    for y in range(K.height):
        for x in range(K.width):
            d = depth_t[y, x]
            if d <= 0:
                continue
            world = pose_t.rotation @ (Kinv @ np.array([x, y, 1.0]) * d) + pose_t.translation
            cam = pose_s.rotation.T @ (world - pose_s.translation)
            if cam[2] <= 0:
                continue
            us = K.fx * cam[0] / cam[2] + K.cx
            vs = K.fy * cam[1] / cam[2] + K.cy
            if not (0 <= us <= K.width - 1 and 0 <= vs <= K.height - 1):
                continue
            x0 = min(int(np.floor(us)), K.width - 2)
            y0 = min(int(np.floor(vs)), K.height - 2)
            a, b = us - x0, vs - y0
            corners = [zbuf_s[y0, x0], zbuf_s[y0, x0 + 1], zbuf_s[y0 + 1, x0], zbuf_s[y0 + 1, x0 + 1]]
            if min(corners) <= 0:
                continue
            z = (1 - b) * ((1 - a) * corners[0] + a * corners[1]) + b * ((1 - a) * corners[2] + a * corners[3])
            valid[y, x] = abs(z - cam[2]) <= threshold
    return valid


def random_two_object_scene(seed):
    rng = np.random.default_rng(seed)
    back = (rng.uniform(1.5, 2.5), -2.0, 2.0, -1.5, 1.5)
    w, h = rng.uniform(0.3, 0.7, size=2)
    x0, z0 = rng.uniform(-0.6, 0.6 - w), rng.uniform(-0.6, 0.6 - h)
    front = (rng.uniform(-0.2, 0.6), x0, x0 + w, z0, z0 + h)
    scene = RectScene([back, front])
    eye_t = np.array([rng.uniform(-0.3, 0.3), -2.5, rng.uniform(-0.2, 0.2)])
    eye_s = eye_t + np.array([rng.uniform(0.2, 0.5) * rng.choice([-1, 1]), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)])
    pose_t = look_at(eye_t, (0.0, 1.0, 0.0))
    pose_s = look_at(eye_s, (rng.uniform(-0.3, 0.3), 1.0, rng.uniform(-0.2, 0.2)))  # rotated second view
    return scene, pose_t, pose_s


@pytest.mark.parametrize("seed", range(12))
def test_validity_mask_equals_zbuffer_oracle(seed):
    K = Intrinsics(14.0, 14.0, 9.5, 7.5, 20, 16)
    scene, pose_t, pose_s = random_two_object_scene(seed)
    depth_t = scene.zbuffer(K, pose_t)
    zbuf_s = scene.zbuffer(K, pose_s)
    got = compute_correspondence(depth_t, K, relative_transform(pose_t, pose_s), zbuf_s).valid
    want = visibility_oracle(K, pose_t, depth_t, pose_s, zbuf_s, DEFAULT_OCCL_THRESHOLD)
    assert want.any() and not want.all()
    np.testing.assert_array_equal(got, want)
