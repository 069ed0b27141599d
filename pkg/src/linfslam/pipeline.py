"""Keyframe-by-keyframe L-infinity SLAM driver.

Per keyframe: relative motions inside the window, incremental rotation
averaging, and a known-rotation solve for the window (inline or queued on a
worker pool). Loop events extend the covisibility graph, trigger a
system-wide averaging and the direction-constrained known-rotation solve.
Positions never feed back into rotation estimation, so queued solves can
finish in any order.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import krot as krot_mod
from .ba import BaConfig, run_ba_slam
from .exceptions import (
    BadParams,
    DisconnectedGraph,
    Infeasible,
    InsufficientRays,
    LinfSlamError,
    NoEdgeToNewFrame,
    NonPositiveDepth,
)
from .geometry import KeyframePose, Rotation
from .graph import CovisibilityGraph, Edge, graph_window
from .relmotion import RelMotionConfig, estimate_relative
from .rotavg import RotAvgConfig, RotationEstimate, irls_rotation_average
from .rotavg import incremental_update
from .tdc import build_tdc, sample_tracks, solve_tdc
from .tracks import ObservationTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopEvent:
    at_frame: int
    matched_frames: tuple

    def __post_init__(self):
        ms = tuple(sorted(int(m) for m in self.matched_frames))
        if any(m >= self.at_frame for m in ms):
            raise BadParams(f"loop at {self.at_frame}: matched frames must precede it")
        object.__setattr__(self, "matched_frames", ms)
        object.__setattr__(self, "at_frame", int(self.at_frame))


@dataclass
class PipelineConfig:
    """Settings for :func:`run_linf_slam`.

    ``relative_motion`` optionally replaces two-view estimation; it is called
    as ``hook(j, k, u_j, u_k)`` and returns a :class:`RelativeMotion` or
    ``None`` to drop the edge.
    """

    window_size: int = 10
    loop_sample_size: int = 300
    alpha: float = float(np.deg2rad(2.0))
    krot_mode: str = "inline"
    krot_tol: float = 1e-6
    tdc_tol: float = 1e-6
    window_max_tracks: int | None = 150
    min_shared: int = 20
    seed: int = 0
    tdc_at: str = "last"
    final_triangulation: str = "linf"
    solve_positions: bool = True
    n_workers: int = 2
    rotavg: RotAvgConfig = field(default_factory=RotAvgConfig)
    relmotion: RelMotionConfig = field(default_factory=RelMotionConfig)
    relative_motion: object = None

    def __post_init__(self):
        if self.window_size < 2:
            raise BadParams("window_size must be at least 2")
        if self.loop_sample_size < 2:
            raise BadParams("loop_sample_size must be at least 2")
        if not 0 < self.alpha < np.pi / 2:
            raise BadParams("alpha must lie in (0, pi/2)")
        if self.krot_mode not in ("inline", "deferred"):
            raise BadParams(f"krot_mode must be 'inline' or 'deferred', got {self.krot_mode!r}")
        if self.tdc_at not in ("last", "every"):
            raise BadParams(f"tdc_at must be 'last' or 'every', got {self.tdc_at!r}")
        if self.final_triangulation not in ("linf", "none"):
            raise BadParams(f"unknown final_triangulation {self.final_triangulation!r}")
        if self.krot_tol <= 0 or self.tdc_tol <= 0 or self.min_shared < 5:
            raise BadParams("tolerances must be positive and min_shared at least 5")


@dataclass
class SlamResult:
    rotations: dict
    poses: dict
    points: dict
    timings: dict
    log: list
    window_solutions: dict = field(default_factory=dict, repr=False)
    pre_closure_centres: dict = field(default_factory=dict, repr=False)
    tdc_solution: object = field(default=None, repr=False)
    graph: CovisibilityGraph | None = field(default=None, repr=False)
    unlocated: list = field(default_factory=list)
    infeasible: list = field(default_factory=list)

    @property
    def centres(self):
        return {f: p.c for f, p in self.poses.items()}


def _krot_job(frame, rotations, tracks, tol):
    """Pure function of its snapshot: returns ``(frame, solution | None, message)``."""
    try:
        problem = krot_mod.build_krot(rotations, tracks)
        if krot_mod.zero_baseline(problem, tol):
            return frame, None, "infeasible (zero baseline: rotation alone explains the window)"
        sol = krot_mod.solve_krot(problem, tol)
    except Infeasible as exc:
        return frame, None, f"infeasible ({exc})"
    except LinfSlamError as exc:
        return frame, None, f"skipped ({type(exc).__name__}: {exc})"
    if sol.degenerate:
        return frame, None, "infeasible (zero baseline: all centres coincide)"
    return frame, sol, f"gamma*={sol.gamma_star:.6e}"


def _fit_scale_shift(src, dst):
    """Least-squares ``s, d`` with ``s * src + d ~ dst`` (rows are points)."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    den = float(np.sum(a * a))
    if den <= 1e-18:
        return None
    s = float(np.sum(a * b)) / den
    if s <= 0:
        return None
    return s, md - s * ms


STITCH_TRIM = 3.0


def _trimmed_fit(src, dst, rounds=3):
    fit = _fit_scale_shift(src, dst)
    keep = np.ones(len(src), bool)
    for _ in range(rounds):
        if fit is None:
            return None
        r = np.linalg.norm(fit[0] * src + fit[1] - dst, axis=1)
        nxt = r <= STITCH_TRIM * np.median(r) + 1e-12
        if np.array_equal(nxt, keep):
            break
        keep = nxt
        refit = _fit_scale_shift(src[keep], dst[keep])
        if refit is None:
            break
        fit = refit
    return fit


def stitch_windows(window_solutions, order):
    """Chain per-window solutions into one frame by scale and shift.

    Each window is mapped onto the already stitched centres and points it
    shares. Correspondences far off the fit (poorly constrained window
    points) are trimmed before refitting. Returns ``(centres, points)``.
    """
    centres, points = {}, {}
    for f in order:
        sol = window_solutions.get(f)
        if sol is None:
            continue
        wc = sol.camera_centres()
        wp = {t: p.x for t, p in sol.points.items()}
        if not centres:
            centres.update({g: np.asarray(c) for g, c in wc.items()})
            points.update(wp)
            continue
        keys_c = [g for g in wc if g in centres]
        keys_p = [t for t in wp if t in points]
        if not keys_c and not keys_p:
            continue
        src = np.array([wc[g] for g in keys_c] + [wp[t] for t in keys_p])
        dst = np.array([centres[g] for g in keys_c] + [points[t] for t in keys_p])
        fit = _trimmed_fit(src, dst)
        if fit is None:
            continue
        s, d = fit
        for g, c in wc.items():
            centres.setdefault(g, s * np.asarray(c) + d)
        for t, x in wp.items():
            points.setdefault(t, s * x + d)
    return centres, points


def _relative(cfg, table, j, k):
    ids, u_j, u_k = table.shared(j, k)
    if len(ids) < cfg.min_shared:
        return None
    if cfg.relative_motion is not None:
        return cfg.relative_motion(j, k, u_j, u_k)
    try:
        return estimate_relative(u_j, u_k, cfg.relmotion)
    except (InsufficientRays, LinfSlamError):
        return None


def _edge(j, k, motion):
    return Edge.oriented(j, k, motion.r_jk, motion.t_e, float(motion.n_inliers))


def run_linf_slam(keyframes, tracks, loop_events=(), cfg=None):
    """Run the L-infinity SLAM pipeline over ``keyframes`` (frame ids in order).

    Returns a :class:`SlamResult`. Known-rotation windows that are infeasible
    or degenerate (zero baseline) are logged and skipped.

    Raises
    ------
    DisconnectedGraph
        a keyframe shares too few tracks with its window to be oriented.
    """
    cfg = cfg or PipelineConfig()
    frames = [int(f) for f in keyframes]
    table = ObservationTable(tracks)
    events = {ev.at_frame: ev for ev in loop_events}
    last_event = max((ev.at_frame for ev in loop_events if ev.at_frame in set(frames)), default=None)
    graph = CovisibilityGraph()
    lines, timings = [], {}
    res = SlamResult({}, {}, {}, timings, lines, graph=graph)
    if not frames:
        return res
    graph.add_node(frames[0])
    est = RotationEstimate({frames[0]: Rotation.identity()}, 0.0, 0, True)
    lines.append(f"frame {frames[0]}: anchor")
    pool = ThreadPoolExecutor(cfg.n_workers) if cfg.krot_mode == "deferred" and cfg.solve_positions else None
    pending, tdc_jobs = [], []
    try:
        for i, t in enumerate(frames[1:], start=1):
            times = timings.setdefault(t, {})
            lo = max(0, i - cfg.window_size + 1)
            window = frames[lo:i + 1]
            span = frames[max(0, lo - 1):i + 1]
            start = time.perf_counter()
            graph.add_node(t)
            n_edges = 0
            for j in span[:-1]:
                motion = _relative(cfg, table, j, t)
                if motion is not None:
                    graph.add_edge(_edge(j, t, motion))
                    n_edges += 1
            times["relmotion"] = time.perf_counter() - start
            if n_edges == 0:
                raise DisconnectedGraph(f"keyframe {t} shares fewer than {cfg.min_shared} tracks with its window")
            start = time.perf_counter()
            try:
                est = incremental_update(est, graph_window(graph, span, require_connected=False), t, cfg.rotavg)
            except NoEdgeToNewFrame as exc:
                raise DisconnectedGraph(str(exc)) from exc
            times["rotavg"] = time.perf_counter() - start
            lines.append(f"frame {t}: {n_edges} edges, window rotation cost {est.cost:.6e}")

            if cfg.solve_positions:
                wt = table.tracks_in(window)
                if cfg.window_max_tracks is not None and len(wt) > cfg.window_max_tracks:
                    wt = sample_tracks(wt, cfg.window_max_tracks, seed=cfg.seed + t)
                snap = {f: est.rotations[f] for f in window}
                if pool is None:
                    start = time.perf_counter()
                    out = _krot_job(t, snap, wt, cfg.krot_tol)
                    times["krot"] = time.perf_counter() - start
                    pending.append(out)
                else:
                    pending.append(pool.submit(_krot_job, t, snap, wt, cfg.krot_tol))

            if t in events:
                ev = events[t]
                added = 0
                for m in ev.matched_frames:
                    if m in graph and not graph.has_edge(m, t):
                        motion = _relative(cfg, table, m, t)
                        if motion is not None:
                            graph.add_edge(_edge(m, t, motion))
                            added += 1
                start = time.perf_counter()
                fixed = frozenset({frames[0]})
                full_cfg = RotAvgConfig(**{**cfg.rotavg.__dict__, "fixed": fixed})
                est = irls_rotation_average(graph, est.rotations, full_cfg)
                times["global_rotavg"] = time.perf_counter() - start
                lines.append(f"frame {t}: loop with {list(ev.matched_frames)}, {added} loop edges, "
                             f"global rotation cost {est.cost:.6e}")
                if cfg.solve_positions and (cfg.tdc_at == "every" or t == last_event):
                    tdc_jobs.append((t, dict(est.rotations), graph.copy()))
    finally:
        if pool is not None:
            done = [p.result() for p in pending]
            pool.shutdown()
            pending = done
    res.rotations = dict(est.rotations)
    if not cfg.solve_positions:
        return res

    for f, sol, msg in sorted(pending, key=lambda x: x[0]):
        lines.append(f"krot window at {f}: {msg}")
        if sol is None:
            res.infeasible.append(("krot", f))
        else:
            res.window_solutions[f] = sol
    centres, _ = stitch_windows(res.window_solutions, frames)
    res.pre_closure_centres = dict(centres)

    for t, rots, g in tdc_jobs:
        start = time.perf_counter()
        sol = _run_tdc(t, rots, g, table, cfg, lines, res)
        timings[t]["tdc"] = time.perf_counter() - start
        if sol is not None:
            res.tdc_solution = sol
    if res.tdc_solution is not None:
        centres = _merge_tdc(res.tdc_solution, res.window_solutions, frames)

    res.poses = {f: KeyframePose.from_centre(res.rotations[f], centres[f]) for f in frames if f in centres}
    res.unlocated = [f for f in frames if f not in centres]
    if res.unlocated:
        lines.append(f"positions unavailable for {len(res.unlocated)} frame(s): {res.unlocated}")
    if cfg.final_triangulation == "linf":
        res.points = _final_map(res.poses, table, cfg, lines, res)
    return res


def _run_tdc(t, rots, g, table, cfg, lines, res):
    upto = [f for f in g.nodes if f <= t]
    candidates = table.tracks_in(upto)
    sampled = sample_tracks(candidates, cfg.loop_sample_size, seed=cfg.seed)
    edges = [e for e in g.edges if e.t_e is not None and e.j in rots and e.k in rots]
    try:
        problem = build_tdc(rots, sampled, edges, cfg.alpha)
        sol = solve_tdc(problem, cfg.tdc_tol)
    except Infeasible as exc:
        lines.append(f"tdc at {t}: infeasible ({exc})")
        res.infeasible.append(("tdc", t))
        return None
    except LinfSlamError as exc:
        lines.append(f"tdc at {t}: skipped ({type(exc).__name__}: {exc})")
        return None
    lines.append(f"tdc at {t}: {len(sampled)} tracks, {len(edges)} direction edges, gamma*={sol.gamma_star:.6e}")
    return sol


def _merge_tdc(tdc_sol, window_solutions, frames):
    """Centres from the direction-constrained solve, later frames stitched on."""
    base = {f: np.asarray(c) for f, c in tdc_sol.camera_centres().items()}
    seed = krot_mod.KRotSolution(tdc_sol.points, {}, tdc_sol.gamma_star, None, centres=base)
    later = {min(base) - 1: seed}
    last = max(base)
    later.update({f: s for f, s in window_solutions.items() if f > last})
    order = [min(base) - 1] + [f for f in frames if f > last]
    centres, _ = stitch_windows(later, order)
    return centres


def _final_map(poses, table, cfg, lines, res):
    if len(poses) < 2:
        lines.append("triangulation: skipped (fewer than two located frames)")
        res.infeasible.append(("map", None))
        return {}
    cs = np.array([p.c for p in poses.values()])
    if np.ptp(cs, axis=0).max() <= 1e-9 * max(1.0, np.abs(cs).max()):
        lines.append("triangulation: infeasible (zero baseline), map skipped")
        res.infeasible.append(("map", None))
        return {}
    points, failed = {}, 0
    for t in table.tracks_in(list(poses)):
        try:
            points[t.track_id], _ = krot_mod.triangulate_point_linf(t, poses, cfg.krot_tol)
        except (Infeasible, NonPositiveDepth, LinfSlamError):
            failed += 1
    lines.append(f"triangulation: {len(points)} points, {failed} failed")
    return points


def detect_loops_proximity(poses, radius, window_size=10):
    """Loop events from camera centres closer than ``radius``.

    A frame produces an event when its centre lies strictly within
    ``radius`` of a frame at least ``window_size`` keyframes older.
    """
    if isinstance(poses, dict):
        ids = sorted(poses)
        cs = np.array([poses[f].c for f in ids])
    else:
        ids = list(range(len(poses)))
        cs = np.array([p.c for p in poses])
    events = []
    for i in range(window_size, len(ids)):
        d = np.linalg.norm(cs[:i - window_size + 1] - cs[i], axis=1)
        hits = np.nonzero(d < radius)[0]
        if len(hits):
            events.append(LoopEvent(ids[i], tuple(ids[h] for h in hits)))
    return events


@dataclass
class RuntimeSeries:
    frame_ids: list
    rotavg_s: np.ndarray
    ba_s: np.ndarray

    @property
    def median_ratio(self):
        return float(np.median(self.ba_s) / np.median(self.rotavg_s))


def compare_runtime(keyframes, tracks, cfg=None, ba_cfg=None):
    """Per-window wall-clock of incremental rotation averaging against windowed BA.

    Both pipelines run over the same keyframes with the same window size; the
    first ``window_size - 1`` keyframes are warm-up and excluded.
    """
    cfg = cfg or PipelineConfig()
    cfg = PipelineConfig(**{**cfg.__dict__, "solve_positions": False})
    ba_cfg = ba_cfg or BaConfig(window_size=cfg.window_size)
    frames = [int(f) for f in keyframes]
    linf = run_linf_slam(frames, tracks, (), cfg)
    ba = run_ba_slam(frames, tracks, (), ba_cfg, cfg.relmotion)
    warm = frames[cfg.window_size - 1:] if cfg.window_size > 1 else frames[1:]
    ids = [f for f in warm if "rotavg" in linf.timings.get(f, {}) and f in ba.timings]
    return RuntimeSeries(
        ids,
        np.array([linf.timings[f]["rotavg"] for f in ids]),
        np.array([ba.timings[f] for f in ids]),
    )
