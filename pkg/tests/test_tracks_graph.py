import numpy as np
import pytest

from linfslam.exceptions import DisconnectedGraph
from linfslam.geometry import Rotation, rotation_about
from linfslam.graph import CovisibilityGraph, Edge, graph_union, graph_window
from linfslam.synthetic import SceneParams, generate
from linfslam.tracks import FeatureTrack, MapPoint, Observation, ObservationTable, tracks_from_observations


def _chain(n):
    return CovisibilityGraph(range(n), [Edge(j, j + 1, Rotation.identity()) for j in range(n - 1)])


def test_track_requires_increasing_frames():
    with pytest.raises(ValueError):
        FeatureTrack.from_arrays(0, [2, 1], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FeatureTrack.from_arrays(0, [1, 1], np.zeros((2, 2)))


def test_observation_rejects_nan():
    with pytest.raises(ValueError):
        Observation(0, 0, [np.nan, 0.0])
    with pytest.raises(ValueError):
        MapPoint([np.inf, 0, 0], 3)


def test_tracks_from_observations_groups_and_sorts():
    obs = [Observation(5, 2, [0, 0]), Observation(1, 0, [1, 1]), Observation(5, 0, [2, 2])]
    tracks = tracks_from_observations(obs)
    assert [t.track_id for t in tracks] == [1, 5]
    assert tracks[1].frame_ids == [0, 2]


def test_restrict_and_measurement():
    t = FeatureTrack.from_arrays(3, [0, 1, 4], [[0, 0], [1, 1], [2, 2]])
    r = t.restrict([1, 4])
    assert r.frame_ids == [1, 4]
    assert np.array_equal(r.measurement(4), [2, 2])
    with pytest.raises(KeyError):
        r.measurement(0)


def test_observation_table_shared():
    tracks = [
        FeatureTrack.from_arrays(0, [0, 1], [[0, 0], [0.1, 0]]),
        FeatureTrack.from_arrays(1, [0, 2], [[1, 1], [1.1, 1]]),
        FeatureTrack.from_arrays(2, [0, 1, 2], [[2, 2], [2.1, 2], [2.2, 2]]),
    ]
    tab = ObservationTable(tracks)
    ids, uj, uk = tab.shared(0, 1)
    assert list(ids) == [0, 2]
    assert np.allclose(uk[:, 0], [0.1, 2.1])
    assert tab.n_shared(1, 2) == 1
    assert [t.track_id for t in tab.tracks_in([1, 2])] == [2]


def test_edge_validation():
    with pytest.raises(ValueError):
        Edge(2, 1, Rotation.identity())
    with pytest.raises(ValueError):
        Edge(0, 1, Rotation.identity(), t_e=[1.0, 1.0, 0.0])


def test_edge_oriented_flips_measurement(rng):
    r = rotation_about([0, 0, 1], 0.3)
    t = np.array([0.6, 0.0, 0.8])
    e = Edge.oriented(4, 2, r, t)
    assert (e.j, e.k) == (2, 4)
    assert np.allclose(e.r_jk.m, r.T)
    # t is C_2 - C_4 in frame 4; C_4 - C_2 in frame 2 is -R_2 R_4^T t
    assert np.allclose(e.t_e, -r @ t)


def test_duplicate_edge_replaced():
    g = _chain(3)
    g.add_edge(Edge(0, 1, rotation_about([1, 0, 0], 0.1)))
    assert len(g.edges) == 2


def test_window_full_range_is_same_graph():
    g = _chain(4)
    w = graph_window(g, range(4))
    assert w.nodes == g.nodes and [(e.j, e.k) for e in w.edges] == [(e.j, e.k) for e in g.edges]


def test_window_chain_subrange():
    w = graph_window(_chain(4), range(1, 4))
    assert [(e.j, e.k) for e in w.edges] == [(1, 2), (2, 3)]


def test_window_disconnected_raises():
    g = CovisibilityGraph(range(4), [Edge(0, 1, Rotation.identity()), Edge(2, 3, Rotation.identity())])
    with pytest.raises(DisconnectedGraph):
        graph_window(g, range(4))
    with pytest.raises(ValueError):
        graph_window(g, [])


def test_union_appends_loop_edges():
    loop = CovisibilityGraph([0, 3], [Edge(0, 3, Rotation.identity())])
    u = graph_union(_chain(4), loop)
    assert u.has_edge(3, 0) and len(u.edges) == 4


def test_two_loop_windows_connected():
    sc = generate("two-loop", SceneParams(n_frames=30, n_points=200), 0)
    tab = ObservationTable(sc.tracks)
    edges = [Edge(j, k, sc.relative_rotation(j, k)) for j in range(30) for k in range(j + 1, 30)
             if tab.n_shared(j, k) >= 20]
    g = CovisibilityGraph(range(30), edges)
    for t in range(30):
        graph_window(g, range(max(0, t - 9), t + 1))
