"""Synthetic scenes with known ground truth for verification and benchmarks."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .exceptions import BadParams
from .geometry import KeyframePose, Rotation, rotation_about
from .tracks import FeatureTrack, MapPoint

KINDS = ("circle", "two-loop", "straight", "pure-rotation", "walk-and-turn")
DEFAULT_SIGMA = 1.0 / 500.0


@dataclass
class SceneParams:
    """Generator parameters.

    ``noise_bound`` caps the norm of every 2D perturbation; it defaults to
    three times ``noise_sigma``. ``noise_model`` is ``"truncated"``
    (Gaussian, rejected above the bound) or ``"uniform"`` (uniform in the
    disc of radius ``noise_bound``).
    """

    n_frames: int = 20
    n_points: int = 100
    radius: float = 4.0
    scene_radius: float = 1.0
    noise_sigma: float = 0.0
    noise_bound: float | None = None
    noise_model: str = "truncated"
    outlier_rate: float = 0.0
    direction_noise_deg: float = 0.0
    fov_deg: float = 80.0
    sweep_deg: float = 90.0
    n_rotation_frames: int = 8
    max_track_length: int | None = None

    def validate(self, kind):
        if kind not in KINDS:
            raise BadParams(f"unknown trajectory kind {kind!r}; expected one of {KINDS}")
        if self.n_frames < 1 or self.n_points < 1:
            raise BadParams("n_frames and n_points must be positive")
        if self.radius <= 0 or self.scene_radius <= 0:
            raise BadParams("radii must be positive")
        if self.noise_sigma < 0 or (self.noise_bound is not None and self.noise_bound < 0):
            raise BadParams("noise parameters must be non-negative")
        if self.noise_model not in ("truncated", "uniform"):
            raise BadParams(f"unknown noise model {self.noise_model!r}")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise BadParams("outlier_rate must lie in [0, 1)")
        if not 0.0 < self.fov_deg < 180.0:
            raise BadParams("fov_deg must lie in (0, 180)")
        if kind == "walk-and-turn" and not 0 < self.n_rotation_frames < self.n_frames:
            raise BadParams("n_rotation_frames must lie strictly inside the sequence")
        if self.max_track_length is not None and self.max_track_length < 2:
            raise BadParams("max_track_length must be at least 2")

    @property
    def bound(self):
        if self.noise_bound is not None:
            return float(self.noise_bound)
        return 3.0 * self.noise_sigma


@dataclass
class SyntheticScene:
    kind: str
    params: SceneParams
    seed: int
    gt_poses: list
    gt_points: list
    tracks: list
    outliers: set = field(default_factory=set)

    @property
    def frame_ids(self):
        return list(range(len(self.gt_poses)))

    @property
    def noise_bound(self):
        return self.params.bound

    @property
    def rotations(self):
        return {j: p.r for j, p in enumerate(self.gt_poses)}

    @property
    def pose_dict(self):
        return dict(enumerate(self.gt_poses))

    @property
    def centres(self):
        return np.array([p.c for p in self.gt_poses])

    def diameter(self):
        """Largest distance between camera centres (falls back to the point cloud)."""
        c = self.centres
        if len(c) > 1:
            d = np.max(np.linalg.norm(c[:, None] - c[None], axis=2))
            if d > 0:
                return float(d)
        x = np.array([p.x for p in self.gt_points])
        return float(np.max(np.linalg.norm(x[:, None] - x[None], axis=2)))

    def relative_rotation(self, j, k):
        return Rotation.from_matrix(self.gt_poses[k].r.m @ self.gt_poses[j].r.m.T)

    def relative_direction(self, j, k, noise_deg=None, rng=None):
        """Unit direction of centre ``k`` in camera ``j``'s frame, optionally perturbed.

        Returns ``None`` for coincident centres.
        """
        pj, pk = self.gt_poses[j], self.gt_poses[k]
        d = pj.r.m @ (pk.c - pj.c)
        n = np.linalg.norm(d)
        if n < 1e-12:
            return None
        d = d / n
        noise = self.params.direction_noise_deg if noise_deg is None else noise_deg
        if noise > 0:
            rng = rng if rng is not None else np.random.default_rng(self.seed + 7919 * j + k)
            d = perturb_direction(d, np.deg2rad(noise), rng)
        return d

    def observation_dict(self):
        return {(o.track_id, o.frame_id): o.u for t in self.tracks for o in t.observations}


def perturb_direction(d, angle, rng):
    """Rotate unit vector ``d`` by exactly ``angle`` about a random perpendicular axis."""
    a = rng.normal(size=3)
    a -= (a @ d) * d
    a /= np.linalg.norm(a)
    return rotation_about(a, angle) @ d


def look_at(centre, target, up=(0.0, 0.0, 1.0)):
    """Rotation whose optical axis points from ``centre`` to ``target``."""
    f = np.asarray(target, float) - np.asarray(centre, float)
    f /= np.linalg.norm(f)
    up = np.asarray(up, float)
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Rotation.from_matrix(np.vstack([r, d, f]))


def _ball(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.uniform(0.2, 1.0, size=(n, 1)) ** (1 / 3)


def _trajectory(kind, p, rng):
    n = p.n_frames
    R = p.radius
    if kind == "circle":
        phi = 2 * np.pi * np.arange(n) / n
        centres = np.column_stack([R * np.cos(phi), R * np.sin(phi), 0.2 * R * np.sin(3 * phi)])
        rots = [look_at(c, (0.0, 0.0, 0.0)) for c in centres]
        points = _ball(rng, p.n_points, p.scene_radius)
    elif kind == "two-loop":
        phi = 4 * np.pi * np.arange(n) / n
        centres = np.column_stack([
            R * np.cos(phi),
            R * np.sin(phi),
            0.3 * R * np.sin(phi / 4),
        ])
        rots = [look_at(c, (0.0, 0.0, 0.0)) for c in centres]
        points = _ball(rng, p.n_points, p.scene_radius)
    elif kind == "straight":
        xs = np.linspace(0.0, R, n)
        centres = np.column_stack([xs, np.zeros(n), np.zeros(n)])
        rots = [look_at(c, c + np.array([0.0, 1.0, 0.0])) for c in centres]
        points = np.column_stack([
            rng.uniform(-0.5 * R, 1.5 * R, p.n_points),
            rng.uniform(R, 2 * R, p.n_points),
            rng.uniform(-0.5 * R, 0.5 * R, p.n_points),
        ])
    elif kind == "pure-rotation":
        yaw = np.deg2rad(p.sweep_deg) * (np.arange(n) / max(n - 1, 1) - 0.5)
        centres = np.zeros((n, 3))
        rots = [look_at(np.zeros(3), (np.cos(a), np.sin(a), 0.0)) for a in yaw]
        half = 0.5 * np.deg2rad(p.sweep_deg) + 0.4 * np.deg2rad(p.fov_deg)
        az = rng.uniform(-half, half, p.n_points)
        el = rng.uniform(-0.3, 0.3, p.n_points)
        dist = rng.uniform(3.0, 8.0, p.n_points) * p.scene_radius
        points = dist[:, None] * np.column_stack([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
    else:  # walk-and-turn
        m = p.n_rotation_frames
        yaw = np.deg2rad(p.sweep_deg) * (np.arange(m) / max(m - 1, 1) - 0.5)
        centres = np.zeros((n, 3))
        centres[m:, 0] = np.linspace(0.0, R, n - m + 1)[1:]
        dirs = [(-np.sin(a), np.cos(a), 0.0) for a in yaw] + [(0.0, 1.0, 0.0)] * (n - m)
        rots = [look_at(c, c + np.asarray(d)) for c, d in zip(centres, dirs)]
        points = np.column_stack([
            rng.uniform(-R, 2 * R, p.n_points),
            rng.uniform(2.0, 2.0 + R, p.n_points) * p.scene_radius,
            rng.uniform(-1.0, 1.0, p.n_points),
        ])
    poses = [KeyframePose.from_centre(r, c) for r, c in zip(rots, centres)]
    return poses, points


def _noise(rng, p, size):
    bound = p.bound
    if bound <= 0:
        return np.zeros((size, 2))
    if p.noise_model == "uniform":
        ang = rng.uniform(0, 2 * np.pi, size)
        rad = bound * np.sqrt(rng.uniform(0, 1, size))
        return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    out = rng.normal(scale=p.noise_sigma if p.noise_sigma > 0 else bound / 3, size=(size, 2))
    bad = np.linalg.norm(out, axis=1) > bound
    while np.any(bad):
        out[bad] = rng.normal(scale=p.noise_sigma if p.noise_sigma > 0 else bound / 3, size=(bad.sum(), 2))
        bad = np.linalg.norm(out, axis=1) > bound
    return out


def generate(kind="circle", params=None, seed=0):
    """Generate a synthetic scene; deterministic for a fixed ``seed``."""
    p = params if params is not None else SceneParams()
    if isinstance(p, dict):
        p = SceneParams(**p)
    p.validate(kind)
    rng = np.random.default_rng(seed)
    poses, points = _trajectory(kind, p, rng)
    half_fov = np.tan(0.5 * np.deg2rad(p.fov_deg))
    rmat = np.stack([q.r.m for q in poses])
    tvec = np.stack([q.t for q in poses])
    cam = np.einsum("fab,pb->pfa", rmat, points) + tvec[None]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam[..., :2] / cam[..., 2:3]
    visible = (cam[..., 2] > 1e-3) & np.all(np.abs(u) < half_fov, axis=2)

    if p.max_track_length is not None:
        for i in range(len(points)):
            fr = np.nonzero(visible[i])[0]
            if len(fr) > p.max_track_length:
                start = rng.integers(0, len(fr) - p.max_track_length + 1)
                keep = fr[start:start + p.max_track_length]
                visible[i] = False
                visible[i, keep] = True

    tracks, gt_points, outliers = [], [], set()
    tid = 0
    for i in range(len(points)):
        fr = np.nonzero(visible[i])[0]
        if len(fr) < 2:
            continue
        us = u[i, fr] + _noise(rng, p, len(fr))
        if p.outlier_rate > 0:
            flag = rng.uniform(size=len(fr)) < p.outlier_rate
            for m in np.nonzero(flag)[0]:
                us[m] = rng.uniform(-half_fov, half_fov, 2)
                outliers.add((tid, int(fr[m])))
        tracks.append(FeatureTrack.from_arrays(tid, fr.tolist(), us))
        gt_points.append(MapPoint(points[i], tid))
        tid += 1
    if not tracks:
        raise BadParams("no point is visible in two frames; widen the field of view")
    return SyntheticScene(kind, p, seed, poses, gt_points, tracks, outliers)


def params_dict(params):
    return asdict(params)
