import numpy as np
import pytest
from hypothesis import settings
from scipy.spatial.transform import Rotation as SciRot

from linfslam.geometry import KeyframePose, Rotation, so3_exp
from linfslam.relmotion import RelativeMotion

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


def random_rotation(rng):
    return Rotation(SciRot.random(random_state=rng).as_matrix())


def random_pose(rng, scale=1.0):
    return KeyframePose(random_rotation(rng), rng.normal(size=3) * scale)


def point_in_front(rng, pose, depth=(2.0, 6.0), spread=0.5):
    """World point seen by ``pose`` at a random positive depth."""
    d = rng.uniform(*depth)
    xc = np.array([rng.uniform(-spread, spread) * d, rng.uniform(-spread, spread) * d, d])
    return pose.r.m.T @ (xc - pose.t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def truth_hook(scene, drift_axis=None, drift_deg=0.0, short=10, dir_noise_deg=0.0):
    """Relative-motion hook returning ground truth, optionally with rotation drift on short edges."""
    axis = None if drift_axis is None else np.asarray(drift_axis, float) / np.linalg.norm(drift_axis)

    def hook(j, k, u_j, u_k):
        r = scene.relative_rotation(j, k).m
        if axis is not None and k - j < short:
            r = scene.gt_poses[k].r.m @ so3_exp(-axis * np.deg2rad(drift_deg) * (k - j)) @ scene.gt_poses[j].r.m.T
        t = scene.relative_direction(j, k, dir_noise_deg, np.random.default_rng(1000 * j + k))
        return RelativeMotion(Rotation.from_matrix(r), t, np.ones(len(u_j), bool), "essential")

    return hook


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records and prints one acceptance line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
