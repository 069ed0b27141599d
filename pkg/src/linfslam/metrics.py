"""Gauge alignment and trajectory error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateConfiguration, FrameMismatch
from .geometry import KeyframePose, Rotation, angle_between_rotations, nearest_rotation

COLLINEAR_RATIO = 1e-4


@dataclass(frozen=True)
class Similarity:
    """``x -> s R x + d``."""

    s: float
    r: np.ndarray
    d: np.ndarray
    flagged: bool = False

    def apply_points(self, x):
        return self.s * np.asarray(x, dtype=float) @ self.r.T + self.d

    def apply_pose(self, pose):
        # centre maps like a point, orientation absorbs the inverse rotation
        c = self.apply_points(pose.c)
        return KeyframePose.from_centre(Rotation.from_matrix(pose.r.m @ self.r.T), c)


def _centres(poses):
    if isinstance(poses, dict):
        return np.array([p.c for _, p in sorted(poses.items())])
    return np.array([p.c for p in poses])


def umeyama(src, dst, with_scale=True):
    """Least-squares similarity taking ``src`` onto ``dst`` (rows are points)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    u, sv, vt = np.linalg.svd(cov)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    r = u @ fix @ vt
    var = np.sum(a * a) / len(src)
    s = float(np.sum(sv * np.diag(fix)) / var) if with_scale and var > 0 else 1.0
    d = mu_d - s * r @ mu_s
    return s, r, d


def align_similarity(est_poses, gt_poses, points=None):
    """Similarity aligning estimated camera centres to ground truth.

    Returns ``(Similarity, aligned_poses, aligned_points)``. Collinear centres
    leave the rotation about the line undetermined; in that case the
    rotation is taken from the camera orientations and the scale from the
    trajectory length, and the result is flagged.
    """
    est = _centres(est_poses)
    gt = _centres(gt_poses)
    if len(est) != len(gt):
        raise FrameMismatch("pose lists differ in length")
    if len(est) < 3:
        raise DegenerateConfiguration("need at least three camera centres")
    centred = est - est.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    flagged = False
    # solver-precision estimates of a straight path leave ~1e-6 off-line spread
    if sv[0] == 0 or sv[1] <= COLLINEAR_RATIO * sv[0]:
        flagged = True
        r = align_rotations(est_poses, gt_poses)
        len_e = np.sum(np.linalg.norm(np.diff(est, axis=0), axis=1))
        len_g = np.sum(np.linalg.norm(np.diff(gt, axis=0), axis=1))
        s = len_g / len_e if len_e > 0 else 1.0
        d = gt.mean(axis=0) - s * r @ est.mean(axis=0)
    else:
        s, r, d = umeyama(est, gt)
    sim = Similarity(s, r, d, flagged)
    poses = est_poses.values() if isinstance(est_poses, dict) else est_poses
    aligned = [sim.apply_pose(p) for p in poses]
    if isinstance(est_poses, dict):
        aligned = dict(zip(sorted(est_poses), aligned))
    pts = None if points is None else sim.apply_points(points)
    return sim, aligned, pts


def align_rotations(est_poses, gt_poses):
    """Best single rotation ``G`` with ``R_gt ~ R_est G^T`` in the chordal sense."""
    er = [p.r.m if hasattr(p, "r") else np.asarray(getattr(p, "m", p)) for p in _values(est_poses)]
    gr = [p.r.m if hasattr(p, "r") else np.asarray(getattr(p, "m", p)) for p in _values(gt_poses)]
    return nearest_rotation(sum(g.T @ e for e, g in zip(er, gr)))


def _values(x):
    return [v for _, v in sorted(x.items())] if isinstance(x, dict) else list(x)


@dataclass
class Metrics:
    frame_ids: list
    pos_err: np.ndarray
    rot_err_deg: np.ndarray

    @property
    def pos_max(self):
        return float(self.pos_err.max()) if len(self.pos_err) else 0.0

    @property
    def pos_rmse(self):
        return float(np.sqrt(np.mean(self.pos_err ** 2))) if len(self.pos_err) else 0.0

    @property
    def rot_max(self):
        return float(self.rot_err_deg.max()) if len(self.rot_err_deg) else 0.0

    @property
    def rot_rmse(self):
        return float(np.sqrt(np.mean(self.rot_err_deg ** 2))) if len(self.rot_err_deg) else 0.0


def compute_metrics(aligned_est, gt):
    """Per-frame position and rotation errors of an already aligned estimate.

    Both arguments are dicts ``frame_id -> KeyframePose``.
    """
    if set(aligned_est) != set(gt):
        raise FrameMismatch(f"frame sets differ: {sorted(set(aligned_est) ^ set(gt))}")
    frames = sorted(gt)
    pos = np.array([np.linalg.norm(aligned_est[f].c - gt[f].c) for f in frames])
    rot = np.array([np.rad2deg(angle_between_rotations(gt[f].r.m, aligned_est[f].r.m)) for f in frames])
    return Metrics(frames, pos, rot)


def evaluate(est, gt):
    """Align ``est`` to ``gt`` (dicts of poses) by a similarity and compute metrics."""
    frames = sorted(gt)
    if set(est) != set(gt):
        raise FrameMismatch(f"frame sets differ: {sorted(set(est) ^ set(gt))}")
    _, aligned, _ = align_similarity({f: est[f] for f in frames}, {f: gt[f] for f in frames})
    return compute_metrics(aligned, gt)


def rotation_errors_deg(est_rotations, gt_rotations):
    """Per-frame rotation error after removing the best global rotation."""
    frames = sorted(gt_rotations)
    e = [est_rotations[f].m if hasattr(est_rotations[f], "m") else est_rotations[f] for f in frames]
    g = [gt_rotations[f].m if hasattr(gt_rotations[f], "m") else gt_rotations[f] for f in frames]
    G = nearest_rotation(sum(gi.T @ ei for ei, gi in zip(e, g)))
    return np.array([np.rad2deg(angle_between_rotations(gi, ei @ G.T)) for ei, gi in zip(e, g)])
