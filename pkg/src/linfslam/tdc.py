"""Known-rotation solves over camera centres with translation-direction cones.

Each measured relative direction ``t_jk`` (world frame) constrains the
displacement ``d = C_k - C_j`` to the circular cone of half-angle ``alpha``
around ``t_jk``::

    |Z[:2] d| <= tan(alpha) * (t_jk . d)

where ``Z`` rotates ``t_jk`` onto the optical axis. These cones do not
depend on the reprojection level, so they enter the bisection as fixed
constraints.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import conic
from .exceptions import AlphaOutOfRange, DisconnectedGraph, Infeasible, MissingRotation, UnderconstrainedTrack
from .geometry import Rotation, residual_ratio, KeyframePose
from .graph import CovisibilityGraph, Edge
from .krot import DEPTH_FLOOR, VERIFY_SLACK, GaugeConfig, KRotSolution, _default_scale_measurement, _rot_matrix
from .tracks import MapPoint

log = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])
DEFAULT_ALPHA = np.deg2rad(2.0)


def world_direction(r_j, t_e, k_intr=None):
    """Express a camera-frame translation direction in world coordinates."""
    m = _rot_matrix(r_j)
    if k_intr is not None and not k_intr.identity:
        m = k_intr.k_inv @ m
    d = m.T @ np.asarray(t_e, dtype=float)
    return d / np.linalg.norm(d)


def build_z(t):
    """Minimal rotation taking unit vector ``t`` onto ``(0, 0, 1)``.

    For ``t = -e3`` the half-turn about the x axis is used.
    """
    t = np.asarray(t, dtype=float)
    t = t / np.linalg.norm(t)
    axis = np.cross(t, E3)
    s = np.linalg.norm(axis)
    c = float(t @ E3)
    if s < 1e-15:
        return Rotation.identity() if c > 0 else Rotation(np.diag([1.0, -1.0, -1.0]))
    angle = np.arctan2(s, c)
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    m = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx
    return Rotation.from_matrix(m)


@dataclass(frozen=True, eq=False)
class DirectionConstraint:
    """Angular bound between ``C_k - C_j`` and the world direction ``t_jk``."""

    j: int
    k: int
    t_jk: np.ndarray
    alpha: float
    z_mat: Rotation | None = None

    def __post_init__(self):
        t = np.array(self.t_jk, dtype=float).reshape(3)
        if abs(np.linalg.norm(t) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        if not 0.0 < self.alpha < np.pi / 2:
            raise AlphaOutOfRange(f"alpha={self.alpha} must lie in (0, pi/2)")
        t.setflags(write=False)
        object.__setattr__(self, "t_jk", t)
        if self.z_mat is None:
            object.__setattr__(self, "z_mat", build_z(t))

    @classmethod
    def from_edge(cls, edge, rotations, alpha, k_intr=None):
        if edge.t_e is None:
            raise ValueError(f"edge ({edge.j}, {edge.k}) carries no translation direction")
        for f in (edge.j, edge.k):
            if f not in rotations:
                raise MissingRotation(f"direction edge references frame {f} without rotation")
        return cls(edge.j, edge.k, world_direction(rotations[edge.j], edge.t_e, k_intr), alpha)

    def blocks(self):
        """``(D, e)`` rows acting on the displacement ``C_k - C_j``."""
        return self.z_mat.m[:2], np.tan(self.alpha) * self.t_jk

    def slack(self, d):
        """``tan(alpha) t.d - |Z[:2] d|``; non-negative inside the cone."""
        zm, e = self.blocks()
        return float(e @ d - np.linalg.norm(zm @ d))

    def angle(self, d):
        d = np.asarray(d, dtype=float)
        c = d @ self.t_jk / np.linalg.norm(d)
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _as_constraints(direction_edges, rotations, alpha, k_intr=None):
    out = []
    for e in direction_edges:
        if isinstance(e, DirectionConstraint):
            out.append(e if e.alpha == alpha else DirectionConstraint(e.j, e.k, e.t_jk, alpha, e.z_mat))
        elif isinstance(e, Edge):
            out.append(DirectionConstraint.from_edge(e, rotations, alpha, k_intr))
        else:
            j, k, t = e
            for f in (j, k):
                if f not in rotations:
                    raise MissingRotation(f"direction edge references frame {f} without rotation")
            out.append(DirectionConstraint(j, k, t, alpha))
    return out


def sample_tracks(tracks, n, seed=0, min_views=2):
    """Uniformly sample ``n`` tracks (by track id) with at least ``min_views`` views."""
    pool = sorted((t for t in tracks if len(t) >= min_views), key=lambda t: t.track_id)
    if n is None or len(pool) <= n:
        return pool
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in pick]


@dataclass
class TdcProblem:
    """Known-rotation problem over ``[X_i; C_j]`` with direction cones.

    Points come first (3 per track), then every centre except the fixed
    frame's.
    """

    track_ids: np.ndarray
    frame_ids: np.ndarray
    fixed_frame: int
    rotations: dict
    meas_track: np.ndarray
    meas_frame: np.ndarray
    u: np.ndarray
    scale_meas: int
    directions: list
    alpha: float
    depth_floor: float = DEPTH_FLOOR

    def __post_init__(self):
        base = 3 * len(self.track_ids)
        cols = np.full(len(self.frame_ids), -1, dtype=np.int64)
        c = 0
        for i, f in enumerate(self.frame_ids):
            if f != self.fixed_frame:
                cols[i] = base + 3 * c
                c += 1
        self.c_col = cols
        self.frame_index = {int(f): i for i, f in enumerate(self.frame_ids)}

    @property
    def n_vars(self):
        return 3 * len(self.track_ids) + 3 * (len(self.frame_ids) - 1)

    @property
    def measurement_ids(self):
        return [(int(self.track_ids[i]), int(self.frame_ids[j])) for i, j in zip(self.meas_track, self.meas_frame)]

    def _structure_blocks(self):
        M = len(self.u)
        rots = np.stack([_rot_matrix(self.rotations[int(f)]) for f in self.frame_ids])
        r = rots[self.meas_frame]
        s = r[:, :2, :] - self.u[:, :, None] * r[:, 2:3, :]
        xcol = 3 * self.meas_track
        ccol = self.c_col[self.meas_frame]
        has_c = ccol >= 0
        mc = np.nonzero(has_c)[0]
        rows, cols, vals = [], [], []
        for a in range(2):
            for c in range(3):
                rows += [2 * np.arange(M) + a, 2 * mc + a]
                cols += [xcol + c, ccol[mc] + c]
                vals += [s[:, a, c], -s[mc, a, c]]
        amat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * M, self.n_vars)
        )
        rows = [np.repeat(np.arange(M), 3), np.repeat(mc, 3)]
        cols = [(xcol[:, None] + np.arange(3)).reshape(-1), (ccol[mc][:, None] + np.arange(3)).reshape(-1)]
        vals = [r[:, 2, :].reshape(-1), -r[mc, 2, :].reshape(-1)]
        bmat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, self.n_vars)
        )
        return amat, bmat

    def _direction_blocks(self):
        return direction_blocks(self.directions, self.c_col, self.frame_index, self.n_vars)

    def program(self):
        amat, bmat = self._structure_blocks()
        M = len(self.u)
        lin_g = sp.vstack([bmat, bmat[self.scale_meas]]).tocsr()
        lin_h = np.concatenate([np.full(M, self.depth_floor), [1.0]])
        fixed = None
        if self.directions:
            dmat, emat = self._direction_blocks()
            K = len(self.directions)
            fixed = (emat, np.zeros(K), dmat, np.zeros(2 * K), np.full(K, 2))
        return conic.FractionalProgram(
            self.n_vars,
            (bmat, np.zeros(M), amat, np.zeros(2 * M), np.full(M, 2)),
            fixed=fixed,
            linear=(lin_g, lin_h),
        )

    def decode(self, x):
        P = len(self.track_ids)
        pts = x[: 3 * P].reshape(P, 3)
        cs = np.zeros((len(self.frame_ids), 3))
        has = self.c_col >= 0
        cs[has] = x[self.c_col[has][:, None] + np.arange(3)]
        return pts, cs

    def encode(self, points, centres):
        x = np.zeros(self.n_vars)
        for i, tid in enumerate(self.track_ids):
            x[3 * i:3 * i + 3] = points[int(tid)]
        for j, f in enumerate(self.frame_ids):
            if self.c_col[j] >= 0:
                x[self.c_col[j]:self.c_col[j] + 3] = centres[int(f)]
        return x


def direction_blocks(directions, c_col, frame_index, n):
    """Stack ``(e rows, D rows)`` for direction cones over the centre columns."""
    K = len(directions)
    rows_d, cols_d, vals_d = [], [], []
    rows_e, cols_e, vals_e = [], [], []
    for i, dc in enumerate(directions):
        zm, e = dc.blocks()
        for frame, sign in ((dc.k, 1.0), (dc.j, -1.0)):
            col = c_col[frame_index[frame]]
            if col < 0:
                continue
            for a in range(2):
                rows_d += [2 * i + a] * 3
                cols_d += list(range(col, col + 3))
                vals_d += list(sign * zm[a])
            rows_e += [i] * 3
            cols_e += list(range(col, col + 3))
            vals_e += list(sign * e)
    dmat = sp.csr_matrix((vals_d, (rows_d, cols_d)), shape=(2 * K, n))
    emat = sp.csr_matrix((vals_e, (rows_e, cols_e)), shape=(K, n))
    return dmat, emat


def build_tdc(rotations, sampled_tracks, direction_edges, alpha=DEFAULT_ALPHA, gauge_cfg=None, k_intr=None):
    """Assemble the direction-constrained known-rotation problem.

    ``direction_edges`` may hold :class:`~linfslam.graph.Edge` objects (camera
    frame directions), :class:`DirectionConstraint` objects, or
    ``(j, k, t_world)`` tuples.
    """
    if not 0.0 < alpha < np.pi / 2:
        raise AlphaOutOfRange(f"alpha={alpha} must lie in (0, pi/2)")
    gauge = gauge_cfg or GaugeConfig()
    tracks = sorted(sampled_tracks, key=lambda t: t.track_id)
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
    directions = _as_constraints(direction_edges, rotations, alpha, k_intr)
    for dc in directions:
        frames.update((dc.j, dc.k))
    frame_ids = np.array(sorted(frames), dtype=np.int64)
    fidx = {int(f): i for i, f in enumerate(frame_ids)}
    fixed = int(frame_ids[0]) if gauge.fixed_frame is None else int(gauge.fixed_frame)
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
    return TdcProblem(track_ids, frame_ids, fixed, rots, m_track, m_frame, us, scale, directions, alpha,
                      gauge.depth_floor)


def _probe_from(problem, poses):
    """Encode externally supplied poses (e.g. stitched window solutions) as a probe.

    Points are placed by linear least squares given the centres.
    """
    centres = {f: np.asarray(poses[f], dtype=float) for f in problem.frame_ids.tolist() if f in poses}
    if len(centres) != len(problem.frame_ids):
        return None
    c0 = centres[problem.fixed_frame]
    centres = {f: c - c0 for f, c in centres.items()}
    pts = {}
    for i, tid in enumerate(problem.track_ids):
        ms = np.nonzero(problem.meas_track == i)[0]
        rows, rhs = [], []
        for m in ms:
            f = int(problem.frame_ids[problem.meas_frame[m]])
            r = _rot_matrix(problem.rotations[f])
            s = r[:2] - np.outer(problem.u[m], r[2])
            rows.append(s)
            rhs.append(s @ centres[f])
        x, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        pts[int(tid)] = x
    v = problem.encode(pts, centres)
    program = problem.program()
    depths = program.denominators(v)
    if np.any(depths <= 0):
        return None
    return v * max(1.0 / depths[problem.scale_meas], problem.depth_floor / depths.min()) * 1.01


def solve_tdc(problem, tol=1e-6, probe_centres=None, **feas_kw):
    """Globally optimal L-infinity structure and centres under direction cones.

    Raises
    ------
    Infeasible
        when no level satisfies the direction cones; ``details["violated_edges"]``
        lists the direction edges carrying the largest dual weight.
    """
    program = problem.program()
    probe = _probe_from(problem, probe_centres) if probe_centres is not None else None
    try:
        res = conic.minimize_level(program, tol, probe, **feas_kw)
    except Infeasible as exc:
        duals = (exc.details or {}).get("cone_duals")
        edges = []
        if duals is not None and problem.directions:
            dd = np.asarray(duals)[program.n_scaled:]
            order = np.argsort(-dd, kind="stable")
            edges = [(problem.directions[i].j, problem.directions[i].k) for i in order[:5] if dd[i] > 0]
        raise Infeasible(
            f"direction cones with alpha={np.rad2deg(problem.alpha):.3g} deg admit no solution; "
            f"most violated edges: {edges}",
            {"violated_edges": edges},
        ) from exc
    x = res.x_star
    x = x / program.denominators(x)[problem.scale_meas]
    pts, cs = problem.decode(x)
    residuals = {}
    for m, mid in enumerate(problem.measurement_ids):
        f = mid[1]
        r = Rotation(_rot_matrix(problem.rotations[f]))
        pose = KeyframePose.from_centre(r, cs[problem.meas_frame[m]])
        residuals[mid] = residual_ratio(pts[problem.meas_track[m]], pose, problem.u[m])
    worst = max(residuals.values())
    if worst > res.feasible_at + VERIFY_SLACK:
        raise AssertionError(f"certificate failed: residual {worst:.3e} > {res.feasible_at:.3e}")
    points = {int(t): MapPoint(pts[i], int(t)) for i, t in enumerate(problem.track_ids)}
    centres = {int(f): cs[j] for j, f in enumerate(problem.frame_ids)}
    rots = {int(f): problem.rotations[int(f)] for f in problem.frame_ids}
    translations = {f: -_rot_matrix(rots[f]) @ c for f, c in centres.items()}
    return KRotSolution(points, translations, res.gamma_star, res, rots, residuals, centres=centres)


def solve_directions_only(rotations, direction_edges, alpha=DEFAULT_ALPHA, gauge_cfg=None, tol=1e-6, **feas_kw):
    """Camera centres from translation directions alone.

    Minimizes the largest angular deviation ``tan(theta)`` between each
    displacement and its measured direction, capped at ``tan(alpha)``; the
    scale is fixed by a unit projection on the first edge.

    Returns ``(centres, tan_theta)``.

    Raises
    ------
    DisconnectedGraph
        the direction edges do not connect all their frames.
    Infeasible
        no configuration keeps every direction within ``alpha``.
    """
    if not 0.0 < alpha < np.pi / 2:
        raise AlphaOutOfRange(f"alpha={alpha} must lie in (0, pi/2)")
    directions = _as_constraints(direction_edges, rotations, alpha)
    if not directions:
        raise DisconnectedGraph("no direction edges")
    g = CovisibilityGraph()
    for dc in directions:
        g.add_edge(Edge(min(dc.j, dc.k), max(dc.j, dc.k), Rotation.identity()))
    if not g.is_connected():
        raise DisconnectedGraph("direction edges do not form a connected graph")
    gauge = gauge_cfg or GaugeConfig()
    frame_ids = np.array(g.nodes, dtype=np.int64)
    fixed = int(frame_ids[0]) if gauge.fixed_frame is None else int(gauge.fixed_frame)
    c_col = np.full(len(frame_ids), -1, dtype=np.int64)
    c = 0
    for i, f in enumerate(frame_ids):
        if f != fixed:
            c_col[i] = 3 * c
            c += 1
    n = 3 * c
    fidx = {int(f): i for i, f in enumerate(frame_ids)}
    # unit-angle cones: |Z[:2] d| <= tau * (t . d); the builder scales the head by tau
    unit = [DirectionConstraint(dc.j, dc.k, dc.t_jk, np.pi / 4, dc.z_mat) for dc in directions]
    dmat, emat = direction_blocks(unit, c_col, fidx, n)
    K = len(unit)
    lin_g = emat[0]
    program = conic.FractionalProgram(
        n, (emat, np.zeros(K), dmat, np.zeros(2 * K), np.full(K, 2)), linear=(lin_g, np.array([1.0]))
    )
    cap = float(np.tan(alpha))
    cap_res = conic.check_feasibility(program(cap), **feas_kw)
    if not cap_res.feasible:
        raise Infeasible(f"directions are inconsistent beyond alpha={np.rad2deg(alpha):.3g} deg")
    res = conic.bisect_gamma(program, 0.0, cap, tol, hi_result=cap_res, **feas_kw)
    x = res.x_star
    centres = {}
    for i, f in enumerate(frame_ids):
        centres[int(f)] = np.zeros(3) if c_col[i] < 0 else x[c_col[i]:c_col[i] + 3].copy()
    return centres, res.gamma_star
