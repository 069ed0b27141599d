"""Plain-text file formats. Floats are written with 17 significant digits."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import KeyframePose, Rotation
from .tracks import Observation, tracks_from_observations

FMT = "%.17g"


def _f(x):
    return FMT % float(x)


def _open_w(path):
    return open(path, "w", newline="", encoding="utf-8")


def write_tracks(path, tracks):
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "frame_id", "u_x", "u_y"])
        for t in sorted(tracks, key=lambda t: t.track_id):
            for o in t.observations:
                w.writerow([o.track_id, o.frame_id, _f(o.u[0]), _f(o.u[1])])


def read_tracks(path, intrinsics=None):
    """Read a tracks CSV; pixel coordinates are normalized when ``intrinsics`` is given."""
    obs = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        missing = {"track_id", "frame_id", "u_x", "u_y"} - set(r.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in r:
            u = np.array([float(row["u_x"]), float(row["u_y"])])
            if intrinsics is not None:
                u = intrinsics.normalize(u)[0]
            obs.append(Observation(int(row["track_id"]), int(row["frame_id"]), u))
    return tracks_from_observations(obs)


def write_poses(path, poses):
    """``frame_id qw qx qy qz tx ty tz`` per line; ``poses`` maps frame id to pose."""
    with _open_w(path) as fh:
        for f in sorted(poses):
            p = poses[f]
            q = p.r.as_quat()
            fh.write(" ".join([str(int(f))] + [_f(v) for v in (*q, *p.t)]) + "\n")


def read_poses(path):
    poses = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            vals = [float(v) for v in parts[1:]]
            poses[int(parts[0])] = KeyframePose(Rotation.from_quat(vals[:4]), vals[4:])
    return poses


def write_loops(path, events):
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["at_frame", "matched_frame"])
        for ev in events:
            for m in ev.matched_frames:
                w.writerow([ev.at_frame, m])


def read_loops(path):
    from .pipeline import LoopEvent

    grouped = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault(int(row["at_frame"]), []).append(int(row["matched_frame"]))
    return [LoopEvent(at, sorted(ms)) for at, ms in sorted(grouped.items())]


def write_points(path, points):
    """``points`` maps track id to :class:`MapPoint` (or a 3-vector)."""
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "x", "y", "z"])
        for tid in sorted(points):
            x = getattr(points[tid], "x", points[tid])
            w.writerow([int(tid)] + [_f(v) for v in x])


def read_points(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[int(row["track_id"])] = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
    return out


def write_metrics(path, metrics):
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "pos_err", "rot_err_deg"])
        for f, pe, re in zip(metrics.frame_ids, metrics.pos_err, metrics.rot_err_deg):
            w.writerow([f, _f(pe), _f(re)])
        w.writerow(["rmse", _f(metrics.pos_rmse), _f(metrics.rot_rmse)])
        w.writerow(["max", _f(metrics.pos_max), _f(metrics.rot_max)])


def read_metrics(path):
    """Returns ``(rows, summary)`` where summary maps ``rmse``/``max`` to pairs."""
    rows, summary = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = row["frame_id"]
            vals = (float(row["pos_err"]), float(row["rot_err_deg"]))
            if key in ("rmse", "max"):
                summary[key] = vals
            else:
                rows.append((int(key), *vals))
    return rows, summary


def write_runtime(path, series):
    """Runtime series from :func:`linfslam.pipeline.compare_runtime`."""
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "rotavg_s", "ba_s"])
        for f, a, b in zip(series.frame_ids, series.rotavg_s, series.ba_s):
            w.writerow([f, _f(a), _f(b)])
        w.writerow(["median_ratio", "", _f(series.median_ratio)])


def write_log(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
