"""Known-rotation problem: camera translations and structure under L-infinity error.

With all camera rotations fixed, each reprojection-error constraint
``|A v| <= gamma * (b . v)`` over ``v = [X_i; t_j]`` is a second-order cone
for fixed ``gamma``; the globally optimal maximum error is found by bisection
over ``gamma`` with :mod:`linfslam.conic`.
"""
from __future__ import annotations

import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import conic
from .exceptions import (
    AllMeasurementsRemoved,
    Infeasible,
    MissingRotation,
    UnderconstrainedTrack,
)
from .geometry import KeyframePose, Rotation, residual_ratio
from .tracks import FeatureTrack, MapPoint

log = logging.getLogger(__name__)

DEPTH_FLOOR = 1e-6
VERIFY_SLACK = 1e-9


@dataclass
class GaugeConfig:
    """Gauge choice for known-rotation solves.

    ``fixed_frame`` has its translation eliminated (set to zero); by default
    the lowest frame id. ``scale_measurement`` is a ``(track_id, frame_id)``
    pair whose depth is fixed to one; by default chosen automatically.
    """

    fixed_frame: int | None = None
    scale_measurement: tuple | None = None
    depth_floor: float = DEPTH_FLOOR


def _rot_matrix(r):
    return r.m if isinstance(r, Rotation) else np.asarray(r, dtype=float)


@dataclass
class KRotProblem:
    """Stacked measurements of a known-rotation problem.

    Variables are laid out as all points first (3 per track) followed by the
    translations of every frame except ``fixed_frame`` (3 per frame).
    """

    track_ids: np.ndarray
    frame_ids: np.ndarray
    fixed_frame: int
    rotations: dict
    meas_track: np.ndarray
    meas_frame: np.ndarray
    u: np.ndarray
    scale_meas: int
    depth_floor: float = DEPTH_FLOOR
    t_col: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cols = np.full(len(self.frame_ids), -1, dtype=np.int64)
        base = 3 * len(self.track_ids)
        c = 0
        for i, f in enumerate(self.frame_ids):
            if f != self.fixed_frame:
                cols[i] = base + 3 * c
                c += 1
        self.t_col = cols

    @property
    def n_vars(self):
        return 3 * len(self.track_ids) + 3 * (len(self.frame_ids) - 1)

    @property
    def n_measurements(self):
        return len(self.u)

    @property
    def measurement_ids(self):
        return [(int(self.track_ids[i]), int(self.frame_ids[j])) for i, j in zip(self.meas_track, self.meas_frame)]

    def _blocks(self):
        """Sparse ``A`` (2M x n) and ``b`` (M x n) for all measurements."""
        M = self.n_measurements
        rots = np.stack([_rot_matrix(self.rotations[int(f)]) for f in self.frame_ids])
        r = rots[self.meas_frame]
        u = self.u
        s = r[:, :2, :] - u[:, :, None] * r[:, 2:3, :]  # (M, 2, 3)
        xcol = 3 * self.meas_track
        tcol = self.t_col[self.meas_frame]
        has_t = tcol >= 0

        rows_a, cols_a, vals_a = [], [], []
        for a in range(2):
            for c in range(3):
                rows_a.append(2 * np.arange(M) + a)
                cols_a.append(xcol + c)
                vals_a.append(s[:, a, c])
        mt = np.nonzero(has_t)[0]
        for a in range(2):
            rows_a.append(2 * mt + a)
            cols_a.append(tcol[mt] + a)
            vals_a.append(np.ones(len(mt)))
            rows_a.append(2 * mt + a)
            cols_a.append(tcol[mt] + 2)
            vals_a.append(-u[mt, a])
        amat = sp.csr_matrix(
            (np.concatenate(vals_a), (np.concatenate(rows_a), np.concatenate(cols_a))),
            shape=(2 * M, self.n_vars),
        )
        rows_b = [np.repeat(np.arange(M), 3), mt]
        cols_b = [(xcol[:, None] + np.arange(3)).reshape(-1), tcol[mt] + 2]
        vals_b = [r[:, 2, :].reshape(-1), np.ones(len(mt))]
        bmat = sp.csr_matrix(
            (np.concatenate(vals_b), (np.concatenate(rows_b), np.concatenate(cols_b))),
            shape=(M, self.n_vars),
        )
        return amat, bmat

    def program(self):
        """The :class:`~linfslam.conic.FractionalProgram` for bisection."""
        amat, bmat = self._blocks()
        M = self.n_measurements
        lin_g = sp.vstack([bmat, bmat[self.scale_meas]]).tocsr()
        lin_h = np.concatenate([np.full(M, self.depth_floor), [1.0]])
        return conic.FractionalProgram(
            self.n_vars,
            (bmat, np.zeros(M), amat, np.zeros(2 * M), np.full(M, 2)),
            linear=(lin_g, lin_h),
        )

    def decode(self, x):
        """Split a variable vector into ``(points (P,3), translations (F,3))``."""
        P = len(self.track_ids)
        pts = x[: 3 * P].reshape(P, 3)
        ts = np.zeros((len(self.frame_ids), 3))
        has = self.t_col >= 0
        ts[has] = x[self.t_col[has][:, None] + np.arange(3)]
        return pts, ts

    def encode(self, points, translations):
        """Inverse of :meth:`decode` for dicts keyed by track and frame id."""
        x = np.zeros(self.n_vars)
        for i, tid in enumerate(self.track_ids):
            x[3 * i:3 * i + 3] = points[int(tid)]
        for j, f in enumerate(self.frame_ids):
            if self.t_col[j] >= 0:
                x[self.t_col[j]:self.t_col[j] + 3] = translations[int(f)]
        return x

    def without(self, drop_ids):
        """Problem with the measurements ``drop_ids`` removed.

        Tracks left with fewer than two views are dropped as well.
        """
        drop = set(drop_ids)
        ids = self.measurement_ids
        keep = np.array([mid not in drop for mid in ids], dtype=bool)
        tracks = {}
        for m in np.nonzero(keep)[0]:
            tid, fid = ids[m]
            tracks.setdefault(tid, []).append((fid, self.u[m]))
        track_list = [
            FeatureTrack.from_arrays(tid, [f for f, _ in obs], [u for _, u in obs])
            for tid, obs in sorted(tracks.items())
            if len(obs) >= 2
        ]
        if not track_list:
            raise AllMeasurementsRemoved("no track keeps two views")
        scale = ids[self.scale_meas]
        gauge = GaugeConfig(
            fixed_frame=self.fixed_frame,
            scale_measurement=scale if scale not in drop else None,
            depth_floor=self.depth_floor,
        )
        frames = {f for t in track_list for f in t.frame_ids}
        if gauge.fixed_frame not in frames:
            gauge.fixed_frame = None
        return build_krot(self.rotations, track_list, gauge)


def build_krot(rotations, tracks, gauge_cfg=None):
    """Assemble the known-rotation problem for ``tracks`` under ``rotations``.

    Parameters
    ----------
    rotations : dict
        frame id -> :class:`Rotation` (or 3x3 array).
    tracks : list of FeatureTrack
    gauge_cfg : GaugeConfig, optional

    Raises
    ------
    UnderconstrainedTrack
        a track has fewer than two observations.
    MissingRotation
        a track is observed in a frame without a rotation.
    """
    gauge = gauge_cfg or GaugeConfig()
    tracks = sorted(tracks, key=lambda t: t.track_id)
    if not tracks:
        raise UnderconstrainedTrack("no tracks supplied")
    frames = set()
    for t in tracks:
        if len(t) < 2:
            raise UnderconstrainedTrack(f"track {t.track_id} has {len(t)} observation(s)")
        for o in t.observations:
            if o.frame_id not in rotations:
                raise MissingRotation(f"frame {o.frame_id} (track {t.track_id}) has no rotation")
            frames.add(o.frame_id)
    frame_ids = np.array(sorted(frames), dtype=np.int64)
    fixed = int(frame_ids[0]) if gauge.fixed_frame is None else int(gauge.fixed_frame)
    if fixed not in frames:
        raise ValueError(f"fixed frame {fixed} is not observed")
    fidx = {int(f): i for i, f in enumerate(frame_ids)}
    m_track, m_frame, us = [], [], []
    for i, t in enumerate(tracks):
        for o in t.observations:
            m_track.append(i)
            m_frame.append(fidx[o.frame_id])
            us.append(o.u)
    track_ids = np.array([t.track_id for t in tracks], dtype=np.int64)
    m_track = np.array(m_track, dtype=np.int64)
    m_frame = np.array(m_frame, dtype=np.int64)
    us = np.array(us, dtype=float)
    if gauge.scale_measurement is not None:
        tid, fid = gauge.scale_measurement
        hits = np.nonzero((track_ids[m_track] == tid) & (frame_ids[m_frame] == fid))[0]
        if len(hits) == 0:
            raise ValueError(f"scale measurement {gauge.scale_measurement} not present")
        scale = int(hits[0])
    else:
        scale = _default_scale_measurement(m_track, m_frame, fidx[fixed])
    rots = {int(f): rotations[int(f)] for f in frame_ids}
    return KRotProblem(track_ids, frame_ids, fixed, rots, m_track, m_frame, us, scale, gauge.depth_floor)


def _default_scale_measurement(m_track, m_frame, fixed_idx):
    # the longest track's observation in the fixed frame, else its first observation
    counts = np.bincount(m_track)
    in_fixed = m_frame == fixed_idx
    if np.any(in_fixed):
        cand = np.nonzero(in_fixed)[0]
        return int(cand[np.argmax(counts[m_track[cand]])])
    best = int(np.argmax(counts))
    return int(np.nonzero(m_track == best)[0][0])


def algebraic_probe(problem):
    """Linear least-squares estimate of ``[X; t]`` used to seed the bracket.

    Minimizes ``sum |A v|^2`` subject to unit depth on the scale
    measurement. Returns ``None`` when the estimate places any point behind
    a camera.
    """
    amat, bmat = problem._blocks()
    n = problem.n_vars
    gram = (amat.T @ amat).tocsc()
    row = bmat[problem.scale_meas]
    kkt = sp.bmat([[gram + 1e-12 * sp.identity(n), row.T], [row, None]], format="csc")
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    try:
        v = spla.spsolve(kkt, rhs)[:n]
    except RuntimeError:
        return None
    if not np.all(np.isfinite(v)):
        return None
    depths = bmat @ v
    if np.any(depths <= 0):
        return None
    factor = max(1.0 / depths[problem.scale_meas], problem.depth_floor / depths.min()) * 1.01
    return v * factor


@dataclass
class KRotSolution:
    """Globally optimal translations and structure for one known-rotation solve.

    ``centres`` is filled for solutions parameterized by camera centres.
    """

    points: dict
    translations: dict
    gamma_star: float
    certificate: conic.GammaSolveResult
    rotations: dict = field(default_factory=dict, repr=False)
    residuals: dict = field(default_factory=dict, repr=False)
    centres: dict | None = None
    degenerate: bool = False

    def poses(self):
        return {
            f: KeyframePose(Rotation(_rot_matrix(self.rotations[f])), t)
            for f, t in self.translations.items()
        }

    def camera_centres(self):
        if self.centres is not None:
            return dict(self.centres)
        return {f: -_rot_matrix(self.rotations[f]).T @ t for f, t in self.translations.items()}

    @property
    def max_residual(self):
        return max(self.residuals.values()) if self.residuals else 0.0


def _verify(problem, x, bound):
    """Re-evaluate every residual with :func:`residual_ratio` and check the bound."""
    pts, ts = problem.decode(x)
    residuals = {}
    ids = problem.measurement_ids
    for m, (tid, fid) in enumerate(ids):
        j = problem.meas_frame[m]
        pose = KeyframePose(Rotation(_rot_matrix(problem.rotations[fid])), ts[j])
        residuals[(tid, fid)] = residual_ratio(pts[problem.meas_track[m]], pose, problem.u[m])
    worst = max(residuals.values())
    if worst > bound + VERIFY_SLACK:
        raise AssertionError(f"certificate failed: residual {worst:.3e} > {bound:.3e}")
    return residuals


def solve_krot(problem, tol=1e-6, probe=None, **feas_kw):
    """Globally optimal L-infinity translations and points for fixed rotations.

    Parameters
    ----------
    problem : KRotProblem
    tol : bisection tolerance on the maximum reprojection error
    probe : optional variable vector (e.g. the previous window's solution
        encoded with :meth:`KRotProblem.encode`) used to bracket the optimum;
        when omitted a linear least-squares estimate is tried.

    Raises
    ------
    Infeasible
        no configuration with all points in front of the cameras exists.
    """
    program = problem.program()
    if probe is None:
        probe = algebraic_probe(problem)
    res = conic.minimize_level(program, tol, probe, **feas_kw)
    x = res.x_star
    depth = program.denominators(x)[problem.scale_meas]
    x = x / depth
    pts, ts = problem.decode(x)
    residuals = _verify(problem, x, res.feasible_at)
    points = {int(t): MapPoint(pts[i], int(t)) for i, t in enumerate(problem.track_ids)}
    translations = {int(f): ts[j] for j, f in enumerate(problem.frame_ids)}
    rots = {int(f): problem.rotations[int(f)] for f in problem.frame_ids}
    sol = KRotSolution(points, translations, res.gamma_star, res, rots, residuals)
    centres = np.array(list(sol.camera_centres().values()))
    spread = np.ptp(centres, axis=0).max() if len(centres) > 1 else 0.0
    rho = rotation_only_residual(problem)
    sol.degenerate = bool(spread < 1e-6 * max(1.0, np.abs(pts).max()) or rho <= 2 * sol.gamma_star + 10 * tol)
    return sol


def rotation_only_residual(problem):
    """Largest residual when all centres coincide and every point is a direction.

    Each track's direction is the normalized mean of its world-frame rays, so
    this is an upper bound on the best zero-baseline fit.
    """
    rays = np.column_stack([problem.u, np.ones(len(problem.u))])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    rmats = np.stack([_rot_matrix(problem.rotations[int(f)]) for f in problem.frame_ids])
    world = np.einsum("mji,mj->mi", rmats[problem.meas_frame], rays)
    dirs = np.zeros((len(problem.track_ids), 3))
    np.add.at(dirs, problem.meas_track, world)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cam = np.einsum("mij,mj->mi", rmats[problem.meas_frame], dirs[problem.meas_track])
    if np.any(cam[:, 2] <= 0):
        return np.inf
    return float(np.max(np.linalg.norm(problem.u - cam[:, :2] / cam[:, 2:3], axis=1)))


def zero_baseline(problem, tol=1e-6, **feas_kw):
    """True when coincident centres explain the data within twice the optimal level.

    One feasibility test at half the rotation-only residual decides it: if
    that level is infeasible, translation adds less than a factor of two.
    """
    rho = rotation_only_residual(problem)
    if not np.isfinite(rho):
        return False
    if rho <= 10 * tol:
        return True
    res = conic._test_level(problem.program()(0.5 * rho), [], 0.5 * rho, **feas_kw)
    return not res.feasible


def _triangulation_program(track, poses, depth_floor):
    obs = [(o.u, poses[o.frame_id]) for o in track.observations]
    M = len(obs)
    head = np.zeros((M, 3))
    head0 = np.zeros(M)
    body = np.zeros((2 * M, 3))
    body0 = np.zeros(2 * M)
    for m, (u, pose) in enumerate(obs):
        r = pose.r.m
        head[m] = r[2]
        head0[m] = pose.t[2]
        body[2 * m:2 * m + 2] = r[:2] - np.outer(u, r[2])
        body0[2 * m:2 * m + 2] = pose.t[:2] - u * pose.t[2]
    program = conic.FractionalProgram(
        3,
        (sp.csr_matrix(head), head0, sp.csr_matrix(body), body0, np.full(M, 2)),
        linear=(sp.csr_matrix(head), depth_floor - head0),
    )
    return program, body, body0


def triangulate_point_linf(track, poses, tol=1e-6, depth_floor=DEPTH_FLOOR, box=None):
    """Globally optimal L-infinity triangulation of one track with fixed poses.

    Returns ``(MapPoint, gamma)``.

    Raises
    ------
    Infeasible
        the optimum lies at infinity or behind the cameras (diverging rays).
    """
    if len(track) < 2:
        raise UnderconstrainedTrack(f"track {track.track_id} has {len(track)} observation(s)")
    for o in track.observations:
        if o.frame_id not in poses:
            raise MissingRotation(f"no pose for frame {o.frame_id}")
    program, body, body0 = _triangulation_program(track, poses, depth_floor)
    probe, *_ = np.linalg.lstsq(body, -body0, rcond=None)
    centres = np.array([poses[o.frame_id].c for o in track.observations])
    extent = 1.0 + np.abs(centres).max() + np.ptp(centres, axis=0).max()
    if box is None:
        box = 1e3 * extent
    try:
        res = conic.minimize_level(program, tol, probe, box=box)
    except Infeasible as exc:
        raise Infeasible(f"track {track.track_id}: no point in front of all cameras") from exc
    x = res.x_star
    if np.abs(x).max() > 0.99 * box:
        raise Infeasible(f"track {track.track_id}: optimum at infinity (rays do not converge)")
    return MapPoint(x, track.track_id), res.gamma_star


def _support_ids(problem, solution, rel=1e-2):
    """Measurements attaining the optimal maximum residual."""
    ids = problem.measurement_ids
    duals = solution.certificate.support_duals
    if duals is not None and len(duals) == len(ids) and duals.max() > 0:
        return [ids[m] for m in np.nonzero(duals >= rel * duals.max())[0]]
    floor = solution.certificate.infeasible_at
    return [mid for mid in ids if solution.residuals[mid] >= floor - VERIFY_SLACK]


SupportRemoval = namedtuple("SupportRemoval", ["problem", "removed", "solution"])


def remove_support_set(problem, solution, gamma_target, tol=1e-6, max_rounds=10):
    """Repeatedly drop the support set until the optimum falls to ``gamma_target``.

    Returns ``(problem', removed_ids, solution')``.

    Raises
    ------
    AllMeasurementsRemoved
        the target was not reached within ``max_rounds`` or the problem ran
        out of usable tracks.
    """
    removed = []
    rounds = 0
    while solution.gamma_star > gamma_target:
        if rounds >= max_rounds:
            raise AllMeasurementsRemoved(
                f"gamma {solution.gamma_star:.3e} still above target after {max_rounds} rounds"
            )
        support = _support_ids(problem, solution)
        if len(support) >= problem.n_measurements:
            raise AllMeasurementsRemoved("support set covers every measurement")
        log.debug("round %d: removing %d support measurements", rounds, len(support))
        removed.extend(support)
        problem = problem.without(support)
        solution = solve_krot(problem, tol)
        rounds += 1
    return SupportRemoval(problem, removed, solution)
