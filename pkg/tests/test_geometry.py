import numpy as np
import pytest
from hypothesis import given, strategies as st

from linfslam.exceptions import InvalidRotation, NonPositiveDepth
from linfslam.geometry import (
    CameraIntrinsics, KeyframePose, Rotation, build_A_b, hat, nearest_rotation, project,
    residual_ratio, rotation_about, so3_exp, so3_log,
)

from conftest import point_in_front, random_pose, random_rotation

seeds = st.integers(0, 2**32 - 1)


def test_project_optical_axis():
    assert np.allclose(project(np.array([0.0, 0, 1]), KeyframePose.identity()), [0, 0])


def test_project_direct_division():
    assert np.allclose(project(np.array([1.0, 2, 4]), KeyframePose.identity()), [0.25, 0.5])


def test_project_rotated_matches_matrix_product():
    r = rotation_about([0, 1, 0], np.pi / 2)
    x = np.array([0.0, 0, 1])
    # depth of x under R alone is 0, so shift along z to make it 1
    pose = KeyframePose(r, np.array([0.0, 0.0, 1.0]))
    h = pose.matrix() @ np.append(x, 1.0)
    assert np.allclose(project(x, pose), h[:2] / h[2], atol=1e-15)


def test_project_rejects_points_behind():
    with pytest.raises(NonPositiveDepth):
        project(np.array([0.0, 0, -1]), KeyframePose.identity())
    with pytest.raises(NonPositiveDepth):
        project(np.array([1.0, 0, 0]), KeyframePose.identity())


def test_residual_exact_projection_is_zero(rng):
    pose = random_pose(rng)
    x = point_in_front(rng, pose)
    assert residual_ratio(x, pose, project(x, pose)) == pytest.approx(0.0, abs=1e-15)


def test_residual_three_four_five():
    assert residual_ratio(np.array([0.0, 0, 1]), KeyframePose.identity(), [0.3, 0.4]) == pytest.approx(0.5)


def test_build_A_b_identity_zero():
    a, b = build_A_b(Rotation.identity(), [0.0, 0.0])
    assert np.array_equal(a[:, :3], np.eye(3)[:2])
    assert np.array_equal(b, [0, 0, 1, 0, 0, 1])


def test_build_A_b_identity_ones():
    a, _ = build_A_b(Rotation.identity(), [1.0, 1.0])
    assert np.array_equal(a[:, :3], [[1, 0, -1], [0, 1, -1]])
    assert np.array_equal(a[:, 3:], [[1, 0, -1], [0, 1, -1]])


@given(seeds)
def test_residual_equals_cone_ratio(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    x = point_in_front(rng, pose)
    u = rng.uniform(-0.5, 0.5, 2)
    a, b = build_A_b(pose.r, u)
    v = np.concatenate([x, pose.t])
    lhs = residual_ratio(x, pose, u)
    rhs = np.linalg.norm(a @ v) / (b @ v)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, lhs)


@given(seeds, st.floats(0.1, 10.0))
def test_projection_gauge_invariance(seed, s):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    x = point_in_front(rng, pose)
    d = rng.normal(size=3)
    moved = KeyframePose(pose.r, s * pose.t - pose.r.m @ d)
    assert np.allclose(project(s * x + d, moved), project(x, pose), atol=1e-10)


@given(seeds)
def test_rotation_rejects_non_orthonormal(seed):
    rng = np.random.default_rng(seed)
    m = random_rotation(rng).m
    with pytest.raises(InvalidRotation):
        Rotation(m + 1e-6 * rng.normal(size=(3, 3)))
    with pytest.raises(InvalidRotation):
        Rotation(-m)  # det -1
    with pytest.raises(InvalidRotation):
        Rotation(np.eye(2))


def test_rotation_is_immutable(rng):
    r = random_rotation(rng)
    with pytest.raises(ValueError):
        r.m[0, 0] = 2.0


@given(seeds)
def test_centre_consistent_with_translation(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, scale=100.0)
    assert np.allclose(pose.c, -pose.r.m.T @ pose.t, atol=1e-12 * 100)
    back = KeyframePose.from_centre(pose.r, pose.c)
    assert np.allclose(back.t, pose.t, atol=1e-10)


@given(seeds)
def test_quaternion_and_log_round_trip(seed):
    rng = np.random.default_rng(seed)
    r = random_rotation(rng)
    assert np.allclose(Rotation.from_quat(r.as_quat()).m, r.m, atol=1e-12)
    w = so3_log(r.m)
    assert np.allclose(so3_exp(w), r.m, atol=1e-10)


def test_hat_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(hat(a) @ b, np.cross(a, b))


def test_nearest_rotation_projects(rng):
    m = random_rotation(rng).m + 1e-3 * rng.normal(size=(3, 3))
    Rotation(nearest_rotation(m))


def test_intrinsics_round_trip():
    k = CameraIntrinsics.from_focal(500.0, 320.0, 240.0)
    px = np.array([[320.0, 240.0], [820.0, 740.0]])
    n = k.normalize(px)
    assert np.allclose(n, [[0, 0], [1, 1]])
    assert np.allclose(k.to_pixels(n), px)
    assert k.pixels_to_normalized_distance(1.0) == pytest.approx(1 / 500)
