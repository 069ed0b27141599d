"""Command-line driver: ``linfslam {generate,run,eval,bench,triangulate}``.

Exit status: 0 on success, 2 when a solver reported infeasibility (partial
outputs are still written), 1 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .ba import BaConfig, run_ba_slam
from .exceptions import DisconnectedGraph, FrameMismatch, Infeasible, LinfSlamError
from .krot import triangulate_point_linf
from .metrics import evaluate
from .pipeline import PipelineConfig, compare_runtime, detect_loops_proximity, run_linf_slam
from .relmotion import RelMotionConfig
from .synthetic import KINDS, SceneParams, generate, params_dict
from .tracks import ObservationTable

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=10, help="window size in keyframes")
    p.add_argument("--alpha", type=float, default=2.0, help="direction cone half-angle in degrees")
    p.add_argument("--loop-sample", type=int, default=300, help="tracks sampled for the loop solve")
    p.add_argument("--tol", type=float, default=1e-6, help="bisection tolerance")
    p.add_argument("--krot-mode", choices=("inline", "deferred"), default="inline")
    p.add_argument("--ransac-threshold", type=float, default=1e-3, help="Sampson threshold, normalized units")


def build_parser():
    ap = _Parser(prog="linfslam", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthetic scene -> tracks/poses/loops files")
    g.add_argument("--kind", choices=KINDS, default="circle")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--points", type=int, default=100)
    g.add_argument("--noise-sigma", type=float, default=0.0)
    g.add_argument("--noise-bound", type=float, default=None)
    g.add_argument("--outlier-rate", type=float, default=0.0)
    g.add_argument("--loop-radius", type=float, default=None,
                   help="proximity radius for loop events (default: 0.15 x scene diameter)")
    g.add_argument("--window", type=int, default=10)

    r = sub.add_parser("run", help="pipeline -> trajectory/map/log")
    r.add_argument("--mode", choices=("linf", "ba"), default="linf")
    r.add_argument("--tracks", type=Path, required=True)
    r.add_argument("--loops", type=Path, default=None)
    r.add_argument("--out", type=Path, required=True)
    _common(r)

    e = sub.add_parser("eval", help="trajectory + ground truth -> metrics CSV")
    e.add_argument("--traj", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("bench", help="runtime series CSV (rotation averaging vs BA)")
    b.add_argument("--tracks", type=Path, required=True)
    b.add_argument("--out", type=Path, required=True)
    _common(b)

    t = sub.add_parser("triangulate", help="poses + tracks -> map")
    t.add_argument("--poses", type=Path, required=True)
    t.add_argument("--tracks", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--tol", type=float, default=1e-6)
    return ap


def _pipeline_cfg(args):
    return PipelineConfig(
        window_size=args.window,
        loop_sample_size=args.loop_sample,
        alpha=float(np.deg2rad(args.alpha)),
        krot_mode=args.krot_mode,
        krot_tol=args.tol,
        tdc_tol=args.tol,
        seed=args.seed,
        relmotion=RelMotionConfig(threshold=args.ransac_threshold, seed=args.seed),
    )


def cmd_generate(args):
    params = SceneParams(
        n_frames=args.frames, n_points=args.points, noise_sigma=args.noise_sigma,
        noise_bound=args.noise_bound, outlier_rate=args.outlier_rate,
    )
    scene = generate(args.kind, params, args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    io.write_tracks(out / "tracks.csv", scene.tracks)
    io.write_poses(out / "poses_gt.txt", scene.pose_dict)
    io.write_points(out / "points_gt.csv", {p.track_id: p for p in scene.gt_points})
    radius = args.loop_radius if args.loop_radius is not None else 0.15 * scene.diameter()
    io.write_loops(out / "loops.csv", detect_loops_proximity(scene.pose_dict, radius, args.window))
    meta = {"kind": args.kind, "seed": args.seed, "noise_bound": scene.noise_bound, "params": params_dict(params)}
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_run(args):
    tracks = io.read_tracks(args.tracks)
    frames = ObservationTable(tracks).frame_ids
    loops = io.read_loops(args.loops) if args.loops else []
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    if args.mode == "linf":
        try:
            res = run_linf_slam(frames, tracks, loops, _pipeline_cfg(args))
        except DisconnectedGraph as exc:
            print(f"linfslam: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        io.write_poses(out / "trajectory.txt", res.poses)
        io.write_points(out / "map.csv", res.points)
        io.write_log(out / "log.txt", res.log)
        if res.infeasible and (res.unlocated or any(kind != "krot" for kind, _ in res.infeasible)):
            status = EXIT_INFEASIBLE
    else:
        res = run_ba_slam(frames, tracks, loops, BaConfig(window_size=args.window),
                          RelMotionConfig(threshold=args.ransac_threshold, seed=args.seed))
        io.write_poses(out / "trajectory.txt", res.poses)
        io.write_points(out / "map.csv", res.points)
        io.write_log(out / "log.txt", res.log)
        if res.init_failed or res.disconnected_at is not None:
            status = EXIT_INFEASIBLE
    return status


def cmd_eval(args):
    est = io.read_poses(args.traj)
    gt = io.read_poses(args.gt)
    io.write_metrics(args.out, evaluate(est, gt))
    return EXIT_OK


def cmd_bench(args):
    tracks = io.read_tracks(args.tracks)
    frames = ObservationTable(tracks).frame_ids
    series = compare_runtime(frames, tracks, _pipeline_cfg(args))
    io.write_runtime(args.out, series)
    return EXIT_OK


def cmd_triangulate(args):
    poses = io.read_poses(args.poses)
    tracks = io.read_tracks(args.tracks)
    points, failed = {}, 0
    for t in ObservationTable(tracks).tracks_in(list(poses)):
        try:
            points[t.track_id], _ = triangulate_point_linf(t, poses, args.tol)
        except Infeasible:
            failed += 1
    io.write_points(args.out, points)
    if failed:
        print(f"linfslam: {failed} track(s) could not be triangulated", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "triangulate": cmd_triangulate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (FrameMismatch, ValueError, FileNotFoundError) as exc:
        print(f"linfslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LinfSlamError as exc:
        print(f"linfslam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
