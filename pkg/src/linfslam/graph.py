"""Covisibility graph carrying relative-motion measurements on its edges."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import DisconnectedGraph
from .geometry import Rotation

UNIT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Edge:
    """Relative motion between keyframes ``j < k``.

    ``r_jk`` maps camera-j coordinates to camera-k coordinates up to
    translation, so that ``r_jk = R_k R_j^T``. ``t_e`` is the unit direction
    of camera k's centre expressed in camera j's frame, or ``None`` when no
    translation direction was estimated.
    """

    j: int
    k: int
    r_jk: Rotation
    t_e: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.j >= self.k:
            raise ValueError(f"edge must satisfy j < k, got ({self.j}, {self.k})")
        if not isinstance(self.r_jk, Rotation):
            object.__setattr__(self, "r_jk", Rotation(self.r_jk))
        if self.t_e is not None:
            t = np.array(self.t_e, dtype=float).reshape(3)
            if abs(np.linalg.norm(t) - 1.0) > UNIT_TOL:
                raise ValueError("translation direction must be a unit vector")
            t.setflags(write=False)
            object.__setattr__(self, "t_e", t)

    @classmethod
    def oriented(cls, a, b, r_ab, t_e=None, weight=1.0):
        """Build an edge from a measurement taken in either orientation."""
        r_ab = r_ab.m if isinstance(r_ab, Rotation) else np.asarray(r_ab, dtype=float)
        if a < b:
            return cls(a, b, Rotation(r_ab), t_e, weight)
        # measurement is (b -> a); flip it
        r_ba = r_ab.T
        t_flip = None
        if t_e is not None:
            t_flip = -r_ab @ np.asarray(t_e, dtype=float)
            t_flip = t_flip / np.linalg.norm(t_flip)
        return cls(b, a, Rotation(r_ba), t_flip, weight)


class CovisibilityGraph:
    """Keyframe nodes joined by relative-motion edges.

    Mutation (``add_node``, ``add_edge``) is single-writer; the window and
    union helpers always return new graphs.
    """

    def __init__(self, nodes=(), edges=()):
        self._nodes = set(int(n) for n in nodes)
        self._edges = {}
        for e in edges:
            self.add_edge(e)

    @property
    def nodes(self):
        return sorted(self._nodes)

    @property
    def edges(self):
        return [self._edges[key] for key in sorted(self._edges)]

    def __len__(self):
        return len(self._nodes)

    def __contains__(self, node):
        return node in self._nodes

    def add_node(self, n):
        self._nodes.add(int(n))

    def add_edge(self, edge):
        """Insert or replace the edge between ``edge.j`` and ``edge.k``."""
        self._nodes.update((edge.j, edge.k))
        self._edges[(edge.j, edge.k)] = edge

    def edge(self, j, k):
        return self._edges.get((min(j, k), max(j, k)))

    def has_edge(self, j, k):
        return (min(j, k), max(j, k)) in self._edges

    def neighbours(self, n):
        return sorted({e.k if e.j == n else e.j for e in self._edges.values() if n in (e.j, e.k)})

    def edges_of(self, n):
        return [e for key, e in sorted(self._edges.items()) if n in key]

    def _labels(self):
        nodes = self.nodes
        index = {n: i for i, n in enumerate(nodes)}
        rows = [index[e.j] for e in self._edges.values()]
        cols = [index[e.k] for e in self._edges.values()]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
        return connected_components(adj, directed=False)

    def is_connected(self):
        if len(self.nodes) <= 1:
            return True
        return self._labels()[0] == 1

    def component(self, n):
        """Sorted node ids in the connected component containing ``n``."""
        nodes = self.nodes
        _, labels = self._labels()
        own = labels[nodes.index(n)]
        return [m for m, lab in zip(nodes, labels) if lab == own]

    def copy(self):
        return CovisibilityGraph(self._nodes, self._edges.values())


def graph_window(graph, frames, require_connected=True):
    """Induced subgraph on ``frames`` (any iterable or a ``range``)."""
    keep = set(int(f) for f in frames)
    if not keep:
        raise ValueError("frame range is empty")
    sub = CovisibilityGraph(
        keep & set(graph.nodes), [e for e in graph.edges if e.j in keep and e.k in keep]
    )
    if require_connected and not sub.is_connected():
        raise DisconnectedGraph(f"window {min(keep)}..{max(keep)} is not connected")
    return sub


def graph_union(base, extra):
    """Union of two graphs; edges from ``extra`` (e.g. loop closures) win ties."""
    out = base.copy()
    for n in extra.nodes:
        out.add_node(n)
    for e in extra.edges:
        out.add_edge(e)
    return out
