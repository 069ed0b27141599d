"""Bundle adjustment baseline and the keyframe BA-SLAM loop built on it.

Poses are updated by left perturbation ``R <- Exp(d) R``, ``t <- t + dt``;
points additively. Point blocks are eliminated with the Schur complement.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import BadParams, CameraDisconnected, DivergedOrStalled, InsufficientRays, NonPositiveDepth
from .geometry import KeyframePose, Rotation, hat, ray, so3_exp
from .relmotion import RelMotionConfig, estimate_relative, median_parallax
from .tracks import FeatureTrack, MapPoint, ObservationTable

log = logging.getLogger(__name__)


@dataclass
class BaConfig:
    max_iter: int = 50
    lm_damping_init: float = 1e-3
    robust_loss: str = "none"
    cauchy_scale: float = 2e-3
    outlier_distance_threshold: float = np.inf
    damping_cap: float = 1e12
    rel_tol: float = 1e-10
    window_size: int = 10
    init_parallax_deg: float = 1.0
    spawn_parallax_deg: float = 0.5
    strict: bool = False

    def __post_init__(self):
        if self.max_iter <= 0 or self.lm_damping_init <= 0 or self.damping_cap <= 0:
            raise BadParams("max_iter and damping parameters must be positive")
        if self.robust_loss not in ("none", "cauchy"):
            raise BadParams(f"unknown robust loss {self.robust_loss!r}")
        if self.cauchy_scale <= 0 or self.outlier_distance_threshold <= 0:
            raise BadParams("cauchy_scale and outlier_distance_threshold must be positive")
        if self.window_size < 2:
            raise BadParams("window_size must be at least 2")


@dataclass
class BaResult:
    poses: dict
    points: dict
    cost: float
    iterations: int = 0
    accepted: int = 0
    status: str = "converged"

    def __iter__(self):
        return iter((self.poses, self.points, self.cost))


class _Layout:
    """Index arrays tying observations to pose and point slots."""

    def __init__(self, poses, points, tracks, frozen, fix_points=False):
        self.frames = sorted(poses)
        self.track_ids = sorted(points)
        fidx = {f: i for i, f in enumerate(self.frames)}
        pidx = {t: i for i, t in enumerate(self.track_ids)}
        cam, pt, us = [], [], []
        for t in tracks:
            if t.track_id not in pidx:
                continue
            for o in t.observations:
                if o.frame_id in fidx:
                    cam.append(fidx[o.frame_id])
                    pt.append(pidx[t.track_id])
                    us.append(o.u)
        self.cam = np.array(cam, dtype=np.int64)
        self.pt = np.array(pt, dtype=np.int64)
        self.u = np.array(us, dtype=float).reshape(-1, 2)
        self.rot = np.stack([poses[f].r.m for f in self.frames]) if self.frames else np.zeros((0, 3, 3))
        self.t = np.stack([poses[f].t for f in self.frames]) if self.frames else np.zeros((0, 3))
        self.x = np.stack([np.asarray(getattr(points[t], "x", points[t]), float) for t in self.track_ids]) \
            if self.track_ids else np.zeros((0, 3))
        free = np.ones((len(self.frames), 6), dtype=bool)
        for f in frozen:
            if f in fidx:
                free[fidx[f]] = False
        self.cam_free = free.reshape(-1)
        self.fix_points = fix_points

    def fix_scale(self):
        """Freeze the dominant translation component of the first free pose."""
        free = self.cam_free.reshape(-1, 6)
        rows = np.nonzero(free.any(axis=1))[0]
        if len(rows):
            i = rows[0]
            free[i, 3 + int(np.argmax(np.abs(self.t[i])))] = False
        self.cam_free = free.reshape(-1)


def _residuals(rot, t, x, lay):
    p = np.einsum("mij,mj->mi", rot[lay.cam], x[lay.pt]) + t[lay.cam]
    if np.any(p[:, 2] <= 1e-12):
        raise NonPositiveDepth("point behind a camera during bundle adjustment")
    return lay.u - p[:, :2] / p[:, 2:3], p


def _jacobians(rot, t, x, lay):
    r, p = _residuals(rot, t, x, lay)
    z = p[:, 2]
    dpi = np.zeros((len(p), 2, 3))
    dpi[:, 0, 0] = 1 / z
    dpi[:, 1, 1] = 1 / z
    dpi[:, 0, 2] = -p[:, 0] / z ** 2
    dpi[:, 1, 2] = -p[:, 1] / z ** 2
    rx = p - t[lay.cam]
    hx = np.zeros((len(p), 3, 3))
    hx[:, 0, 1], hx[:, 0, 2] = -rx[:, 2], rx[:, 1]
    hx[:, 1, 0], hx[:, 1, 2] = rx[:, 2], -rx[:, 0]
    hx[:, 2, 0], hx[:, 2, 1] = -rx[:, 1], rx[:, 0]
    jc = np.concatenate([np.einsum("mij,mjk->mik", dpi, hx), -dpi], axis=2)
    jp = -np.einsum("mij,mjk->mik", dpi, rot[lay.cam])
    return r, jc, jp


def _robust(sq, cfg):
    if cfg.robust_loss == "none":
        return sq, np.ones_like(sq)
    c2 = cfg.cauchy_scale ** 2
    return c2 * np.log1p(sq / c2), 1.0 / (1.0 + sq / c2)


def _cost(rot, t, x, lay, cfg):
    r, _ = _residuals(rot, t, x, lay)
    return float(np.sum(_robust(np.sum(r * r, axis=1), cfg)[0]))


def _step(lay, r, jc, jp, w, lam):
    F, P = len(lay.frames), len(lay.track_ids)
    wjc = jc * w[:, None, None]
    wjp = jp * w[:, None, None]
    hcc = np.zeros((F, 6, 6))
    np.add.at(hcc, lay.cam, np.einsum("mai,maj->mij", wjc, jc))
    gc = np.zeros((F, 6))
    np.add.at(gc, lay.cam, -np.einsum("mai,ma->mi", wjc, r))
    hcc_d = scipy.linalg.block_diag(*hcc) if F else np.zeros((0, 0))
    hcc_d[np.diag_indices_from(hcc_d)] *= 1.0 + lam
    hcc_d[np.diag_indices_from(hcc_d)] += 1e-12
    free = lay.cam_free
    if lay.fix_points or P == 0:
        a = hcc_d[np.ix_(free, free)]
        b = gc.reshape(-1)[free]
        dc = np.zeros(6 * F)
        dc[free] = _spd_solve(a, b)
        return dc.reshape(F, 6), np.zeros((P, 3))
    hpp = np.zeros((P, 3, 3))
    np.add.at(hpp, lay.pt, np.einsum("mai,maj->mij", wjp, jp))
    gp = np.zeros((P, 3))
    np.add.at(gp, lay.pt, -np.einsum("mai,ma->mi", wjp, r))
    idx = np.arange(3)
    hpp[:, idx, idx] *= 1.0 + lam
    hpp[:, idx, idx] += 1e-12
    hpp_inv = np.linalg.inv(hpp)
    hcp_blocks = np.einsum("mai,maj->mij", wjc, jp)  # (M, 6, 3)
    rows = (6 * lay.cam[:, None, None] + np.arange(6)[None, :, None] + np.zeros((1, 1, 3), int)).reshape(-1)
    cols = (3 * lay.pt[:, None, None] + np.zeros((1, 6, 1), int) + np.arange(3)[None, None, :]).reshape(-1)
    hcp = sp.csr_matrix((hcp_blocks.reshape(-1), (rows, cols)), shape=(6 * F, 3 * P))
    br = np.repeat(np.arange(3 * P), 3)
    bc = (3 * np.arange(P)[:, None, None] + np.zeros((1, 3, 1), int) + np.arange(3)[None, None, :]).reshape(-1)
    hinv = sp.csr_matrix((hpp_inv.reshape(-1), (br, bc)), shape=(3 * P, 3 * P))
    tmp = hcp @ hinv
    schur = hcc_d - (tmp @ hcp.T).toarray()
    rhs = gc.reshape(-1) - tmp @ gp.reshape(-1)
    dc = np.zeros(6 * F)
    dc[free] = _spd_solve(schur[np.ix_(free, free)], rhs[free])
    dp = np.einsum("pij,pj->pi", hpp_inv, gp - (hcp.T @ dc).reshape(P, 3))
    return dc.reshape(F, 6), dp


def _spd_solve(a, b):
    if len(b) == 0:
        return b
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a, check_finite=False), b, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, b, rcond=None)[0]


def _apply(rot, t, x, dc, dp):
    new_rot = np.einsum("fij,fjk->fik", so3_exp(dc[:, :3]), rot) if len(rot) else rot
    return new_rot, t + dc[:, 3:], x + dp


def bundle_adjust(poses, points, tracks, frozen=(), cfg=None, fix_scale=None, fix_points=False):
    """Levenberg-Marquardt refinement of poses and points.

    ``frozen`` frames keep their pose. When fewer than two frames are frozen
    the scale is pinned by one translation component (``fix_scale`` forces
    either behaviour).
    """
    cfg = cfg or BaConfig()
    lay = _Layout(poses, points, tracks, frozen, fix_points)
    n_frozen = sum(1 for f in frozen if f in poses)
    if fix_scale if fix_scale is not None else (n_frozen < 2 and not fix_points):
        lay.fix_scale()
    rot, t, x = lay.rot, lay.t, lay.x
    cost = _cost(rot, t, x, lay, cfg) if len(lay.u) else 0.0
    lam = cfg.lm_damping_init
    status, it, accepted = "converged", 0, 0
    floor = 1e-24 * max(len(lay.u), 1)
    while it < cfg.max_iter and cost > floor:
        it += 1
        r, jc, jp = _jacobians(rot, t, x, lay)
        _, w = _robust(np.sum(r * r, axis=1), cfg)
        while True:
            dc, dp = _step(lay, r, jc, jp, w, lam)
            try:
                cand = _apply(rot, t, x, dc, dp)
                new_cost = _cost(*cand, lay, cfg)
            except NonPositiveDepth:
                new_cost = np.inf
            if new_cost < cost:
                break
            lam *= 10.0
            if lam > cfg.damping_cap:
                status = "stalled"
                break
        if status == "stalled":
            break
        rot, t, x = cand
        rel = (cost - new_cost) / cost
        cost = new_cost
        accepted += 1
        lam = max(lam / 10.0, 1e-15)
        if rel < cfg.rel_tol:
            break
    else:
        if it >= cfg.max_iter and cost > floor:
            status = "max_iter"
    if status == "stalled" and cost <= floor:
        # at the rounding floor nothing can decrease further
        status = "converged"
    if status == "stalled":
        msg = f"damping exceeded {cfg.damping_cap:g} at cost {cost:.3e}"
        if cfg.strict:
            raise DivergedOrStalled(msg)
        log.info("bundle adjustment %s", msg)
    out_poses = dict(poses)
    for i, f in enumerate(lay.frames):
        out_poses[f] = KeyframePose(Rotation.from_matrix(rot[i]), t[i])
    out_points = dict(points)
    for i, tid in enumerate(lay.track_ids):
        out_points[tid] = MapPoint(x[i], tid)
    return BaResult(out_poses, out_points, cost, it, accepted, status)


def analytic_jacobian(poses, points, tracks):
    """Dense Jacobian of the stacked residuals w.r.t. ``[pose params; points]``."""
    lay = _Layout(poses, points, tracks, ())
    _, jc, jp = _jacobians(lay.rot, lay.t, lay.x, lay)
    M, F, P = len(lay.u), len(lay.frames), len(lay.track_ids)
    jac = np.zeros((2 * M, 6 * F + 3 * P))
    for m in range(M):
        jac[2 * m:2 * m + 2, 6 * lay.cam[m]:6 * lay.cam[m] + 6] = jc[m]
        jac[2 * m:2 * m + 2, 6 * F + 3 * lay.pt[m]:6 * F + 3 * lay.pt[m] + 3] = jp[m]
    return jac, lay


def jacobian_check(instance, step=1e-6):
    """Largest deviation between analytic and central-difference Jacobians.

    ``instance`` is a ``(poses, points, tracks)`` triple.
    """
    poses, points, tracks = instance
    jac, lay = analytic_jacobian(poses, points, tracks)
    F = len(lay.frames)
    n = jac.shape[1]
    fd = np.zeros_like(jac)
    for k in range(n):
        cols = []
        for sgn in (1.0, -1.0):
            dc = np.zeros((F, 6))
            dp = np.zeros((len(lay.track_ids), 3))
            if k < 6 * F:
                dc.reshape(-1)[k] = sgn * step
            else:
                dp.reshape(-1)[k - 6 * F] = sgn * step
            r, _ = _residuals(*_apply(lay.rot, lay.t, lay.x, dc, dp), lay)
            cols.append(r.reshape(-1))
        fd[:, k] = (cols[0] - cols[1]) / (2 * step)
    return float(np.max(np.abs(fd - jac)))


def random_instance(rng, n_frames=3, n_points=6):
    """Random interior instance for the Jacobian gate: all depths >= 1."""
    poses = {}
    for f in range(n_frames):
        r = Rotation.from_rotvec(rng.normal(scale=0.3, size=3))
        poses[f] = KeyframePose(r, rng.normal(scale=0.5, size=3))
    points, tracks = {}, []
    for i in range(n_points):
        while True:
            x = rng.normal(size=3) + np.array([0, 0, 5.0])
            depths = [p.r.m[2] @ x + p.t[2] for p in poses.values()]
            if min(depths) > 1.0:
                break
        points[i] = MapPoint(x, i)
        us = [rng.normal(scale=0.2, size=2) for _ in range(n_frames)]
        tracks.append(FeatureTrack.from_arrays(i, list(range(n_frames)), us))
    return poses, points, tracks


def midpoint_triangulate(centres, dirs):
    """Point closest (least squares) to a bundle of rays ``c + s d``."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centres, dirs):
        d = d / np.linalg.norm(d)
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ c
    return np.linalg.lstsq(a, b, rcond=None)[0]


def _world_rays(pose, u):
    return ray(u) @ pose.r.m  # rows: R^T ray


def _triangulate_track(track, poses, min_parallax):
    obs = [(poses[o.frame_id], o.u) for o in track.observations if o.frame_id in poses]
    if len(obs) < 2:
        return None
    dirs = np.vstack([_world_rays(p, u) for p, u in obs])
    cos = np.clip(dirs @ dirs.T, -1, 1)
    if np.arccos(cos.min()) < min_parallax:
        return None
    x = midpoint_triangulate([p.c for p, _ in obs], dirs)
    if any(p.depth(x) <= 1e-6 for p, _ in obs):
        return None
    return x


@dataclass
class BaSlamResult:
    poses: dict
    points: dict
    timings: dict = field(default_factory=dict)
    init_failed: bool = False
    init_pair: tuple | None = None
    disconnected_at: int | None = None
    log: list = field(default_factory=list)


def _init_pair(frames, table, cfg, rel_cfg):
    f0 = frames[0]
    for k in frames[1:]:
        ids, uj, uk = table.shared(f0, k)
        if len(ids) < 8:
            continue
        try:
            m = estimate_relative(uj, uk, rel_cfg)
        except InsufficientRays:
            continue
        if m.method != "essential":
            continue
        par = median_parallax(m.r_jk.m, uj[m.inlier_mask], uk[m.inlier_mask])
        if np.rad2deg(par) > cfg.init_parallax_deg:
            return f0, k, m
    return None


def _distance_outliers(poses, points, table, threshold):
    bad = []
    for tid, p in points.items():
        t = table.tracks[tid]
        for o in t.observations:
            if o.frame_id in poses and np.linalg.norm(p.x - poses[o.frame_id].c) > threshold:
                bad.append(tid)
                break
    return bad


def run_ba_slam(keyframes, tracks, loop_events=(), cfg=None, rel_cfg=None):
    """Keyframe SLAM driven by bundle adjustment.

    Initializes from the first pair with enough parallax, then per keyframe:
    motion-only pose refinement, spawning of new points, windowed BA and the
    distance-based outlier heuristic; full BA at loop events. Stops with a
    partial result when a keyframe keeps no map points.
    """
    cfg = cfg or BaConfig()
    rel_cfg = rel_cfg or RelMotionConfig()
    frames = sorted(keyframes)
    table = ObservationTable(tracks)
    res = BaSlamResult({}, {})
    if len(frames) < 2:
        res.init_failed = True
        res.log.append("init: fewer than two keyframes")
        return res
    pair = _init_pair(frames, table, cfg, rel_cfg)
    if pair is None:
        res.init_failed = True
        res.log.append("init: no keyframe pair with sufficient parallax; map not built")
        return res
    f0, fk, motion = pair
    res.init_pair = (f0, fk)
    poses = {f0: KeyframePose.identity(), fk: KeyframePose.from_centre(motion.r_jk, motion.t_e)}
    points = {}
    dead = set()
    min_par = np.deg2rad(cfg.spawn_parallax_deg)
    for t in table.tracks_in([f0, fk]):
        x = _triangulate_track(t, poses, min_par)
        if x is not None:
            points[t.track_id] = MapPoint(x, t.track_id)
    start = time.perf_counter()
    ba = bundle_adjust(poses, points, tracks, frozen=(f0,), cfg=cfg)
    res.timings[fk] = time.perf_counter() - start
    poses, points = ba.poses, ba.points
    res.log.append(f"init: pair ({f0}, {fk}), {len(points)} points, cost {ba.cost:.3e}")
    loops = {ev.at_frame for ev in loop_events}
    order = [f for f in frames if f not in poses]
    for f in order:
        posed = sorted(poses)
        ref = max(posed, key=lambda p: (table.n_shared(p, f), -abs(p - f)))
        ids, u_ref, u_f = table.shared(ref, f)
        try:
            m = estimate_relative(u_ref, u_f, rel_cfg)
            r0 = Rotation.from_matrix(m.r_jk.m @ poses[ref].r.m)
        except Exception:  # noqa: BLE001 - any two-view failure falls back to the reference pose
            r0 = poses[ref].r
        seen = [tid for tid in table.frame(f)[0].tolist() if tid in points]
        if not seen:
            res.disconnected_at = f
            res.log.append(f"frame {f}: no map points observed; camera disconnected")
            break
        poses[f] = KeyframePose.from_centre(r0, poses[ref].c)
        track_ba = bundle_adjust(
            {f: poses[f]}, {t: points[t] for t in seen}, [table.tracks[t] for t in seen],
            cfg=cfg, fix_points=True, fix_scale=False,
        )
        poses[f] = track_ba.poses[f]
        window = sorted(poses)[-cfg.window_size:]
        for t in table.tracks_in(window):
            if t.track_id in points or t.track_id in dead or f not in t.frame_ids:
                continue
            x = _triangulate_track(t, poses, min_par)
            if x is not None:
                points[t.track_id] = MapPoint(x, t.track_id)
        frozen = [p for p in poses if p not in window]
        if len(frozen) == 0:
            frozen = [window[0]]
        start = time.perf_counter()
        wb = bundle_adjust(poses, points, tracks, frozen=frozen, cfg=cfg)
        res.timings[f] = time.perf_counter() - start
        poses, points = wb.poses, wb.points
        if f in loops:
            fb = bundle_adjust(poses, points, tracks, frozen=(min(poses),), cfg=cfg)
            poses, points = fb.poses, fb.points
            res.log.append(f"frame {f}: loop event, full BA cost {fb.cost:.3e}")
        if np.isfinite(cfg.outlier_distance_threshold):
            for tid in _distance_outliers(poses, points, table, cfg.outlier_distance_threshold):
                del points[tid]
                dead.add(tid)
        if not any(tid in points for tid in table.frame(f)[0].tolist()):
            res.disconnected_at = f
            res.log.append(f"frame {f}: all tracks removed; camera disconnected")
            break
        res.log.append(f"frame {f}: window BA cost {wb.cost:.3e} ({wb.status}), {len(points)} points")
    res.poses, res.points = poses, points
    if res.disconnected_at is not None and cfg.strict:
        raise CameraDisconnected(f"keyframe {res.disconnected_at} retains no tracks")
    return res
