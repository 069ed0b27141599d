import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from linfslam import conic
from linfslam.conic import (
    BadBracket, ConeConstraint, ConicSystem, LinearConstraint, bisect_gamma, bisection_iterations,
    check_feasibility, initial_upper_bound, load_system, minimize_level,
)
from linfslam.exceptions import NumericalFailure, ProbeViolatesLinear
from linfslam.krot import build_krot
from linfslam.synthetic import SceneParams, generate

from oracles import cvxpy_min_slack

seeds = st.integers(0, 2**32 - 1)


def small_krot(seed, n_frames=4, n_points=6, sigma=2e-3):
    sc = generate("circle", SceneParams(n_frames=n_frames, n_points=n_points, noise_sigma=sigma,
                                        fov_deg=120.0), seed)
    return sc, build_krot(sc.rotations, sc.tracks)


def test_trivial_feasible_cone():
    # |x1, x2| <= x0 with x0 >= 1
    cone = ConeConstraint(np.array([[0, 1.0, 0], [0, 0, 1.0]]), np.zeros(2), np.array([1.0, 0, 0]))
    res = check_feasibility([cone], [LinearConstraint([1.0, 0, 0], 1.0)])
    assert res.feasible and res.certified
    assert cone.slack(res.x) > 0 and res.x[0] >= 1.0


def test_trivial_infeasible_cone():
    cone = ConeConstraint(np.eye(2), np.zeros(2), np.zeros(2), beta=-1.0)
    res = check_feasibility([cone])
    assert not res.feasible and res.certified and res.lower_bound > 0


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ConeConstraint(np.eye(2), np.zeros(3), np.zeros(2))
    c1 = ConeConstraint(np.eye(2), np.zeros(2), np.zeros(2), 1.0)
    c2 = ConeConstraint(np.eye(3), np.zeros(3), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        ConicSystem.from_constraints([c1, c2])


@pytest.mark.parametrize("seed", range(12))
def test_classification_matches_external_solver(seed):
    rng = np.random.default_rng(seed)
    n = 4
    cones = [ConeConstraint(rng.normal(size=(2, n)), rng.normal(size=2), rng.normal(size=n), rng.uniform(-1, 1.5))
             for _ in range(5)]
    linears = [LinearConstraint(rng.normal(size=n), rng.uniform(-1, 1)) for _ in range(2)]
    system = ConicSystem.from_constraints(cones, linears)
    s_ref = cvxpy_min_slack(system, conic.DEFAULT_BOX)
    if abs(s_ref) < 1e-6:
        pytest.skip("instance on the feasibility boundary")
    res = check_feasibility(system)
    assert res.feasible == (s_ref < 0)
    if res.feasible:
        assert system.max_violation(res.x) < 0
    else:
        # certified lower bound never exceeds the true optimal slack
        assert res.lower_bound <= s_ref + 1e-6


@given(seeds)
def test_krot_levels_around_optimum(seed):
    _, problem = small_krot(seed % 1000)
    program = problem.program()
    sol = minimize_level(program, tol=1e-6)
    assert check_feasibility(program(sol.feasible_at + 1e-6)).feasible
    assert not check_feasibility(program(max(sol.infeasible_at - 1e-6, 0.0))).feasible


@given(seeds, st.floats(1.0, 3.0))
def test_feasibility_is_monotone_in_level(seed, factor):
    _, problem = small_krot(seed % 1000)
    program = problem.program()
    sol = minimize_level(program, tol=1e-5)
    g1 = sol.feasible_at
    assert check_feasibility(program(g1)).feasible
    assert check_feasibility(program(g1 * factor)).feasible


@given(seeds)
def test_certificate_residuals_bounded(seed):
    _, problem = small_krot(seed % 1000)
    program = problem.program()
    sol = minimize_level(program, tol=1e-6)
    assert program.ratios(sol.x_star).max() <= sol.feasible_at + 1e-9
    assert sol.infeasible_at < sol.gamma_star <= sol.feasible_at
    assert sol.feasible_at - sol.infeasible_at <= 2e-6


@given(st.floats(0.0, 1.0), st.floats(1e-3, 5.0), st.floats(1e-9, 1e-2))
def test_iteration_count_formula(lo, width, tol):
    hi = lo + width
    calls = []

    def builder(g):
        calls.append(g)
        # feasible iff g >= lo + width / 3
        return [ConeConstraint(np.zeros((1, 1)), [lo + width / 3], [0.0], g)], []

    res = bisect_gamma(builder, lo, hi, tol)
    expected = int(np.ceil(np.log2((hi - lo) / tol))) if hi - lo > tol else 0
    assert res.bisection_iters == expected == bisection_iterations(lo, hi, tol)
    assert len(calls) == expected + 1
    assert res.feasible_at - res.infeasible_at <= tol


def test_noiseless_krot_level_is_zero():
    sc = generate("circle", SceneParams(n_frames=5, n_points=10), 0)
    sol = minimize_level(build_krot(sc.rotations, sc.tracks).program(), tol=1e-6)
    assert sol.gamma_star <= 1e-6


def test_bad_bracket():
    _, problem = small_krot(3)
    program = problem.program()
    sol = minimize_level(program, tol=1e-6)
    with pytest.raises(BadBracket):
        bisect_gamma(program, 0.0, 0.5 * sol.infeasible_at, 1e-6)


def test_upper_bound_from_ground_truth_probe():
    sc = generate("circle", SceneParams(n_frames=5, n_points=10), 0)
    problem = build_krot(sc.rotations, sc.tracks)
    pts = {p.track_id: p.x for p in sc.gt_points}
    ts = {f: p.t for f, p in sc.pose_dict.items()}
    # express ground truth in the solver gauge: frame 0 at the origin, unit scale depth
    c0 = sc.gt_poses[0].c
    pts = {k: v - c0 for k, v in pts.items()}
    ts = {f: sc.pose_dict[f].t + sc.pose_dict[f].r.m @ c0 for f in ts}
    x = problem.encode(pts, ts)
    x *= 1.01 / problem.program().denominators(x)[problem.scale_meas]
    assert initial_upper_bound(problem.program(), x) <= 1e-10


def test_upper_bound_noisy_probe_is_feasible():
    _, problem = small_krot(5)
    from linfslam.krot import algebraic_probe
    probe = algebraic_probe(problem)
    bound = initial_upper_bound(problem.program(), probe)
    assert np.isfinite(bound)
    assert check_feasibility(problem.program()(bound)).feasible


def test_upper_bound_rejects_bad_probe():
    _, problem = small_krot(5)
    with pytest.raises(ProbeViolatesLinear):
        initial_upper_bound(problem.program(), np.zeros(problem.n_vars))


def test_dump_round_trip():
    _, problem = small_krot(2)
    system = problem.program()(0.01)
    buf = io.StringIO()
    system.dump(buf)
    buf.seek(0)
    back = load_system(buf)
    assert back.n == system.n and np.array_equal(back.dims, system.dims)
    assert np.array_equal(back.body.toarray(), system.body.toarray())
    assert np.array_equal(back.head0, system.head0)
    assert np.array_equal(back.lin_h, system.lin_h)


def test_stall_is_surfaced(monkeypatch):
    _, problem = small_krot(1)
    monkeypatch.setattr(conic, "STALL_ITERS", 0)
    monkeypatch.setattr(conic, "STALL_TOL", -1.0)
    with pytest.raises(NumericalFailure):
        check_feasibility(problem.program()(1e-4))


def test_stall_inside_bisection_is_recorded(monkeypatch):
    _, problem = small_krot(1)
    program = problem.program()
    ref = minimize_level(program, tol=1e-6)
    real = conic.check_feasibility

    def flaky(system, **kw):
        # every test below the optimum breaks down
        res = real(system, **kw)
        if not res.feasible:
            raise NumericalFailure("forced")
        return res

    monkeypatch.setattr(conic, "check_feasibility", flaky)
    sol = bisect_gamma(program, 0.0, ref.feasible_at * 4, 1e-6)
    assert sol.uncertified
    # the feasible side stays backed by a verified point
    assert program.ratios(sol.x_star).max() <= sol.feasible_at + 1e-9
    assert sol.gamma_star >= ref.infeasible_at - 1e-6
