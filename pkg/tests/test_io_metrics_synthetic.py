import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binom

from linfslam import io
from linfslam.exceptions import BadParams, DegenerateConfiguration, FrameMismatch
from linfslam.geometry import KeyframePose, Rotation, rotation_about
from linfslam.metrics import align_similarity, compute_metrics, evaluate, rotation_errors_deg, umeyama
from linfslam.pipeline import LoopEvent, PipelineConfig, compare_runtime
from linfslam.synthetic import KINDS, SceneParams, generate
from linfslam.tracks import MapPoint

from conftest import random_pose, random_rotation


def random_poses(rng, n=6):
    return {f: random_pose(rng, 3.0) for f in range(n)}


def transform_poses(poses, s, r, d):
    # x -> s r x + d applied to the centres; orientations absorb r
    return {f: KeyframePose.from_centre(Rotation(p.r.m @ r.T), s * r @ p.c + d) for f, p in poses.items()}


# ---------- io ----------

def test_tracks_round_trip_exact(tmp_path):
    sc = generate("circle", SceneParams(n_frames=6, n_points=30, noise_sigma=1e-3), 3)
    io.write_tracks(tmp_path / "t.csv", sc.tracks)
    back = io.read_tracks(tmp_path / "t.csv")
    assert [t.track_id for t in back] == [t.track_id for t in sc.tracks]
    for a, b in zip(sc.tracks, back):
        assert a.frame_ids == b.frame_ids
        for oa, ob in zip(a.observations, b.observations):
            assert np.array_equal(oa.u, ob.u)


def test_poses_round_trip(tmp_path, rng):
    poses = random_poses(rng)
    io.write_poses(tmp_path / "p.txt", poses)
    back = io.read_poses(tmp_path / "p.txt")
    assert sorted(back) == sorted(poses)
    for f in poses:
        # quaternion conversion is the only lossy step
        assert np.allclose(back[f].r.m, poses[f].r.m, atol=1e-15)
        assert np.array_equal(back[f].t, poses[f].t)


def test_poses_bad_line(tmp_path):
    (tmp_path / "p.txt").write_text("0 1 0 0 0 1 2\n")
    with pytest.raises(ValueError):
        io.read_poses(tmp_path / "p.txt")


def test_points_loops_round_trip(tmp_path, rng):
    pts = {t: MapPoint(rng.normal(size=3), t) for t in (4, 1, 9)}
    io.write_points(tmp_path / "m.csv", pts)
    back = io.read_points(tmp_path / "m.csv")
    assert sorted(back) == [1, 4, 9]
    for t in pts:
        assert np.array_equal(back[t], pts[t].x)
    events = [LoopEvent(12, (0, 1)), LoopEvent(20, (3,))]
    io.write_loops(tmp_path / "l.csv", events)
    assert io.read_loops(tmp_path / "l.csv") == events


def test_metrics_round_trip(tmp_path, rng):
    gt = random_poses(rng)
    est = transform_poses(gt, 1.0, np.eye(3), np.zeros(3))
    est[2] = KeyframePose.from_centre(est[2].r, est[2].c + 0.1)
    m = evaluate(est, gt)
    io.write_metrics(tmp_path / "e.csv", m)
    rows, summary = io.read_metrics(tmp_path / "e.csv")
    assert [r[0] for r in rows] == m.frame_ids
    assert np.array_equal([r[1] for r in rows], m.pos_err)
    assert summary["rmse"] == (m.pos_rmse, m.rot_rmse)
    assert summary["max"] == (m.pos_max, m.rot_max)


def test_read_tracks_missing_column(tmp_path):
    (tmp_path / "t.csv").write_text("track_id,frame_id,u_x\n0,0,0.1\n")
    with pytest.raises(ValueError):
        io.read_tracks(tmp_path / "t.csv")


def test_runtime_and_log_files(tmp_path):
    sc = generate("circle", SceneParams(n_frames=5, n_points=60), 0)
    series = compare_runtime(sc.frame_ids, sc.tracks, PipelineConfig(window_size=3))
    io.write_runtime(tmp_path / "r.csv", series)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "frame_id,rotavg_s,ba_s"
    assert lines[-1].startswith("median_ratio,")
    io.write_log(tmp_path / "log.txt", ["a", "b"])
    assert (tmp_path / "log.txt").read_text() == "a\nb\n"


# ---------- metrics ----------

def test_umeyama_recovers_known_similarity(rng):
    x = rng.normal(size=(10, 3))
    r = random_rotation(rng).m
    s, d = 1.7, np.array([0.3, -1.0, 2.0])
    s2, r2, d2 = umeyama(x, s * x @ r.T + d)
    assert abs(s2 - s) < 1e-10
    assert np.allclose(r2, r, atol=1e-10)
    assert np.allclose(d2, d, atol=1e-10)


def test_align_similarity_recovers_known(rng):
    gt = random_poses(rng, 8)
    r = random_rotation(rng).m
    s, d = 0.4, np.array([5.0, 1.0, -3.0])
    est = transform_poses(gt, s, r, d)
    sim, aligned, _ = align_similarity(est, gt)
    assert abs(sim.s - 1 / s) < 1e-10
    assert not sim.flagged
    for f in gt:
        assert np.allclose(aligned[f].c, gt[f].c, atol=1e-10)
        assert np.allclose(aligned[f].r.m, gt[f].r.m, atol=1e-10)


def test_align_similarity_is_least_squares_optimal(rng):
    gt = random_poses(rng, 8)
    est = {f: KeyframePose.from_centre(p.r, p.c + 0.05 * rng.normal(size=3)) for f, p in gt.items()}
    sim, aligned, _ = align_similarity(est, gt)
    frames = sorted(gt)
    ec = np.array([est[f].c for f in frames])
    gc = np.array([gt[f].c for f in frames])

    def cost(s, r, d):
        return float(np.sum((s * ec @ r.T + d - gc) ** 2))

    best = cost(sim.s, sim.r, sim.d)
    for _ in range(20):
        dr = rotation_about(rng.normal(size=3), 1e-3)
        assert cost(sim.s * (1 + 1e-3 * rng.normal()), dr @ sim.r, sim.d + 1e-3 * rng.normal(size=3)) >= best


def test_align_similarity_needs_three_centres(rng):
    gt = random_poses(rng, 2)
    with pytest.raises(DegenerateConfiguration):
        align_similarity(gt, gt)
    with pytest.raises(FrameMismatch):
        align_similarity(random_poses(rng, 4), random_poses(rng, 5))


def test_align_similarity_collinear_is_flagged():
    sc = generate("straight", SceneParams(n_frames=6, n_points=20), 0)
    est = transform_poses(sc.pose_dict, 2.0, rotation_about([0, 0, 1], 0.3), np.ones(3))
    sim, aligned, _ = align_similarity(est, sc.pose_dict)
    assert sim.flagged
    m = compute_metrics(aligned, sc.pose_dict)
    assert m.pos_max < 1e-9 and m.rot_max < 1e-6


def test_compute_metrics_zero_and_known_rotation(rng):
    gt = random_poses(rng)
    m = compute_metrics(gt, gt)
    assert m.pos_rmse == 0.0 and m.rot_max < 1e-6
    rz = rotation_about([0, 0, 1], np.deg2rad(10.0))
    turned = {f: KeyframePose.from_centre(Rotation(rz @ p.r.m), p.c) for f, p in gt.items()}
    m = compute_metrics(turned, gt)
    assert np.allclose(m.rot_err_deg, 10.0, atol=1e-9)
    with pytest.raises(FrameMismatch):
        compute_metrics({0: gt[0]}, gt)


def test_rotation_errors_remove_global_rotation(rng):
    gt = {f: random_rotation(rng) for f in range(5)}
    g = random_rotation(rng).m
    est = {f: Rotation(r.m @ g.T) for f, r in gt.items()}
    assert rotation_errors_deg(est, gt).max() < 1e-6


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_metrics_invariant_under_similarity(seed, scale):
    rng = np.random.default_rng(seed)
    gt = random_poses(rng, 6)
    est = {f: KeyframePose.from_centre(Rotation(rotation_about(rng.normal(size=3), 0.02) @ p.r.m),
                                       p.c + 0.1 * rng.normal(size=3)) for f, p in gt.items()}
    moved = transform_poses(est, scale, random_rotation(rng).m, rng.normal(size=3))
    a, b = evaluate(est, gt), evaluate(moved, gt)
    assert np.allclose(a.pos_err, b.pos_err, atol=1e-9)
    assert np.allclose(a.rot_err_deg, b.rot_err_deg, atol=1e-6)


# ---------- synthetic ----------

@pytest.mark.parametrize("kind", KINDS)
def test_generate_is_deterministic(kind):
    p = SceneParams(n_frames=10, n_points=40, noise_sigma=1e-3, outlier_rate=0.1)
    a, b = generate(kind, p, 5), generate(kind, p, 5)
    assert len(a.tracks) == len(b.tracks)
    for ta, tb in zip(a.tracks, b.tracks):
        assert ta.frame_ids == tb.frame_ids
        assert all(np.array_equal(x.u, y.u) for x, y in zip(ta.observations, tb.observations))
    assert a.outliers == b.outliers


def test_pure_rotation_centres_coincide():
    sc = generate("pure-rotation", SceneParams(n_frames=8, n_points=40), 0)
    assert np.all(sc.centres == sc.centres[0])


@pytest.mark.parametrize("kind", ["circle", "two-loop", "walk-and-turn"])
def test_zero_noise_observations_are_exact(kind):
    sc = generate(kind, SceneParams(n_frames=10, n_points=40), 1)
    for t, p in zip(sc.tracks, sc.gt_points):
        for o in t.observations:
            pose = sc.gt_poses[o.frame_id]
            x = pose.r.m @ p.x + pose.t
            assert np.allclose(o.u, x[:2] / x[2], atol=1e-12)


def test_zero_noise_epipolar_residual():
    sc = generate("circle", SceneParams(n_frames=6, n_points=40), 2)
    j, k = 0, 1
    r = sc.relative_rotation(j, k).m
    pj, pk = sc.gt_poses[j], sc.gt_poses[k]
    t = pk.t - r @ pj.t
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    e = tx @ r
    for tr in sc.tracks:
        if {j, k} <= set(tr.frame_ids):
            uj, uk = np.append(tr.measurement(j), 1.0), np.append(tr.measurement(k), 1.0)
            assert abs(uk @ e @ uj) < 1e-12


def test_noise_respects_bound():
    p = SceneParams(n_frames=8, n_points=60, noise_sigma=0.01, noise_bound=0.012)
    sc = generate("circle", p, 4)
    clean = generate("circle", SceneParams(n_frames=8, n_points=60), 4)
    # same trajectory and points, so each observation moved by at most the bound
    ref = {(t.track_id, o.frame_id): o.u for t in clean.tracks for o in t.observations}
    moved = [np.linalg.norm(o.u - ref[(t.track_id, o.frame_id)]) for t in sc.tracks for o in t.observations
             if (t.track_id, o.frame_id) in ref]
    assert moved and max(moved) <= 0.012 + 1e-12


def test_outlier_rate_within_binomial_interval():
    sc = generate("circle", SceneParams(n_frames=12, n_points=200, outlier_rate=0.3), 0)
    n = sum(len(t) for t in sc.tracks)
    lo, hi = binom.interval(0.99, n, 0.3)
    assert lo <= len(sc.outliers) <= hi


@pytest.mark.parametrize("kind,kw", [
    ("spiral", {}), ("circle", {"n_frames": 0}), ("circle", {"radius": -1.0}),
    ("circle", {"noise_sigma": -0.1}), ("circle", {"outlier_rate": 1.0}), ("circle", {"fov_deg": 180.0}),
    ("circle", {"noise_model": "laplace"}), ("walk-and-turn", {"n_rotation_frames": 20}),
    ("circle", {"max_track_length": 1}),
])
def test_generate_rejects_bad_params(kind, kw):
    with pytest.raises(BadParams):
        generate(kind, SceneParams(**kw), 0)


def test_relative_direction_matches_centres():
    sc = generate("circle", SceneParams(n_frames=8, n_points=20), 0)
    d = sc.relative_direction(1, 4, 0.0)
    pj, pk = sc.gt_poses[1], sc.gt_poses[4]
    v = pk.c - pj.c
    assert np.allclose(pj.r.m.T @ d, v / np.linalg.norm(v), atol=1e-12)
    pr = generate("pure-rotation", SceneParams(n_frames=4, n_points=20), 0)
    assert pr.relative_direction(0, 1, 0.0) is None
