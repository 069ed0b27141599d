"""Chordal rotation averaging by robust iteratively reweighted least squares."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import breadth_first_order, minimum_spanning_tree

from .exceptions import DisconnectedGraph, MissingNode, NoEdgeToNewFrame
from .geometry import Rotation, nearest_rotation, so3_exp, so3_log
from .graph import graph_window as induced_subgraph

log = logging.getLogger(__name__)


@dataclass
class RotAvgConfig:
    """IRLS settings.

    ``loss`` is ``"cauchy"`` (robust, annealed scale) or ``"l2"`` (plain
    chordal least squares). ``fixed`` lists frames held at their initial
    value; by default only the lowest frame id is pinned.
    """

    loss: str = "cauchy"
    sigma_deg: float = 5.0
    sigma_min_deg: float = 1.0
    anneal_every: int = 10
    anneal_factor: float = 0.5
    tol: float = 1e-8
    max_iter: int = 300
    weight_cap: float = 100.0
    fixed: frozenset | None = None
    max_halvings: int = 30


@dataclass
class RotationEstimate:
    rotations: dict
    cost: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def matrices(self):
        return {f: r.m for f, r in self.rotations.items()}


def _mat(r):
    return r.m if isinstance(r, Rotation) else np.asarray(r, dtype=float)


def chordal_cost(graph, rotations):
    """Sum over edges of ``|R_jk - R_k R_j^T|_F^2``."""
    total = 0.0
    for e in graph.edges:
        for f in (e.j, e.k):
            if f not in rotations:
                raise MissingNode(f"no rotation for frame {f}")
        d = e.r_jk.m - _mat(rotations[e.k]) @ _mat(rotations[e.j]).T
        total += float(np.sum(d * d))
    return total


def spanning_tree_init(graph, root=None):
    """Chain relative rotations along a maximum-weight spanning tree from ``root``."""
    nodes = graph.nodes
    if not nodes:
        return {}
    if not graph.is_connected():
        raise DisconnectedGraph("graph is not connected")
    index = {n: i for i, n in enumerate(nodes)}
    root = nodes[0] if root is None else root
    edges = graph.edges
    if not edges:
        return {root: Rotation.identity()}
    wmax = max(e.weight for e in edges)
    rows = [index[e.j] for e in edges]
    cols = [index[e.k] for e in edges]
    # positive costs so that heavier edges are cheaper; ties broken by edge order
    cost = [wmax + 1.0 - e.weight + 1e-9 * i for i, e in enumerate(edges)]
    mst = minimum_spanning_tree(sp.csr_matrix((cost, (rows, cols)), shape=(len(nodes), len(nodes))))
    tree = mst + mst.T
    order, pred = breadth_first_order(tree, index[root], directed=False)
    out = {root: np.eye(3)}
    for i in order[1:]:
        p = nodes[pred[i]]
        n = nodes[i]
        e = graph.edge(p, n)
        if e.j == p:
            out[n] = e.r_jk.m @ out[p]
        else:
            out[n] = e.r_jk.m.T @ out[p]
    return {n: Rotation.from_matrix(m) for n, m in out.items()}


class _EdgeArrays:
    def __init__(self, graph, index, cap):
        edges = graph.edges
        self.ij = np.array([index[e.j] for e in edges], dtype=np.int64)
        self.ik = np.array([index[e.k] for e in edges], dtype=np.int64)
        self.rel = np.stack([e.r_jk.m for e in edges]) if edges else np.zeros((0, 3, 3))
        self.w = np.minimum(np.array([e.weight for e in edges], dtype=float), cap)


def _residuals(ea, rots):
    """Residual rotations ``R_k^T R_jk R_j``, their angles and chordal costs."""
    e = np.einsum("eba,ebc,ecd->ead", rots[ea.ik], ea.rel, rots[ea.ij])
    theta = np.linalg.norm(so3_log(e), axis=1) if len(e) else np.zeros(0)
    # half of the squared chordal distance: 2(1 - cos theta), ~ theta^2 for small angles
    c = 2.0 * (1.0 - np.cos(theta))
    return e, theta, c


def _rho(c, sigma2, loss):
    if loss == "l2":
        return c
    return sigma2 * np.log1p(c / sigma2)


def _rho_prime(c, sigma2, loss):
    if loss == "l2":
        return np.ones_like(c)
    return sigma2 / (sigma2 + c)


def irls_rotation_average(graph, init, cfg=None):
    """Robust chordal averaging of the absolute rotations of ``graph``.

    Each outer iteration linearizes the residual rotations in the tangent
    space, solves the weighted graph-Laplacian system for per-node updates,
    and retracts with the exponential map. A backtracking step keeps the
    robust surrogate non-increasing.
    """
    cfg = cfg or RotAvgConfig()
    nodes = graph.nodes
    for n in nodes:
        if n not in init:
            raise MissingNode(f"no initial rotation for frame {n}")
    if len(nodes) > 1 and not graph.is_connected():
        raise DisconnectedGraph("graph is not connected")
    fixed = set(cfg.fixed) if cfg.fixed is not None else {nodes[0]} if nodes else set()
    fixed &= set(nodes)
    if nodes and not fixed:
        fixed = {nodes[0]}
    index = {n: i for i, n in enumerate(nodes)}
    rots = np.stack([_mat(init[n]) for n in nodes]) if nodes else np.zeros((0, 3, 3))
    free = np.array([index[n] for n in nodes if n not in fixed], dtype=np.int64)
    ea = _EdgeArrays(graph, index, cfg.weight_cap)

    sigma = np.deg2rad(cfg.sigma_deg)
    sigma_min = np.deg2rad(cfg.sigma_min_deg)
    history = []
    converged = len(free) == 0 or len(ea.w) == 0
    it = 0
    free_pos = np.full(len(nodes), -1, dtype=np.int64)
    free_pos[free] = np.arange(len(free))

    def surrogate(r, s2):
        _, _, c = _residuals(ea, r)
        return float(np.sum(ea.w * _rho(c, s2, cfg.loss)))

    while not converged and it < cfg.max_iter:
        if cfg.loss != "l2" and it > 0 and it % cfg.anneal_every == 0:
            sigma = max(sigma * cfg.anneal_factor, sigma_min)
        s2 = sigma * sigma
        e, theta, c = _residuals(ea, rots)
        f_old = float(np.sum(ea.w * _rho(c, s2, cfg.loss)))
        if it == 0:
            history.append(f_old)
        r = so3_log(e)
        sinc = np.where(theta > 1e-12, np.sin(theta) / np.maximum(theta, 1e-300), 1.0)
        wt = ea.w * _rho_prime(c, s2, cfg.loss) * sinc
        step = _solve_tangent(ea, wt, r, free_pos, len(free))
        omega = np.zeros((len(nodes), 3))
        omega[free] = step
        tau = 1.0
        accepted = False
        for _ in range(cfg.max_halvings):
            cand = rots @ so3_exp(tau * omega)
            f_new = surrogate(cand, s2)
            if f_new <= f_old:
                accepted = True
                break
            tau *= 0.5
        it += 1
        if not accepted:
            history.append(f_old)
            converged = True
            break
        rots = np.stack([nearest_rotation(m) for m in cand])
        history.append(f_new)
        if tau * np.max(np.linalg.norm(step, axis=1)) < cfg.tol:
            converged = True
    if not converged:
        log.warning("rotation averaging stopped after %d iterations without converging", it)
    out = {n: Rotation(rots[i]) for n, i in index.items()}
    return RotationEstimate(out, chordal_cost(graph, out), it, converged, history)


def _solve_tangent(ea, wt, r, free_pos, n_free):
    """Weighted least squares for ``omega_k - omega_j = r_e`` over free nodes."""
    pj = free_pos[ea.ij]
    pk = free_pos[ea.ik]
    rows, cols, vals = [], [], []
    rhs = np.zeros((n_free, 3))
    for a, b, sa in ((pk, pk, 1.0), (pj, pj, 1.0), (pk, pj, -1.0), (pj, pk, -1.0)):
        ok = (a >= 0) & (b >= 0)
        rows.append(a[ok])
        cols.append(b[ok])
        vals.append(sa * wt[ok])
    ok = pk >= 0
    np.add.at(rhs, pk[ok], wt[ok, None] * r[ok])
    ok = pj >= 0
    np.add.at(rhs, pj[ok], -wt[ok, None] * r[ok])
    lap = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_free, n_free)
    )
    # tiny ridge guards nodes whose robust weights have all collapsed
    lap = lap + 1e-12 * sp.identity(n_free)
    return spla.splu(lap.tocsc()).solve(rhs)


def incremental_update(prev, graph_window, new_frame, cfg=None):
    """Add ``new_frame`` to a previous estimate and refine the window.

    The new rotation is chained from its strongest edge into an already
    solved frame; the oldest window frame is held fixed and frames outside
    the window keep their previous values.
    """
    cfg = cfg or RotAvgConfig()
    rots = dict(prev.rotations)
    links = [e for e in graph_window.edges_of(new_frame) if (e.k if e.j == new_frame else e.j) in rots]
    if not links:
        raise NoEdgeToNewFrame(f"frame {new_frame} has no edge to a solved frame")
    best = max(links, key=lambda e: (e.weight, -abs(e.j - e.k)))
    if best.j == new_frame:
        rots[new_frame] = Rotation.from_matrix(best.r_jk.m.T @ rots[best.k].m)
    else:
        rots[new_frame] = Rotation.from_matrix(best.r_jk.m @ rots[best.j].m)
    # frames the window cannot reach from the new frame keep their values
    if not graph_window.is_connected():
        graph_window = induced_subgraph(graph_window, graph_window.component(new_frame))
    window = graph_window.nodes
    init = {n: rots[n] for n in window if n in rots}
    missing = [n for n in window if n not in init]
    if missing:
        raise MissingNode(f"window frames {missing} have no previous rotation")
    fixed = cfg.fixed if cfg.fixed is not None else frozenset({min(n for n in window if n != new_frame)})
    sub_cfg = RotAvgConfig(**{**cfg.__dict__, "fixed": fixed})
    est = irls_rotation_average(graph_window, init, sub_cfg)
    rots.update(est.rotations)
    return RotationEstimate(rots, est.cost, est.iterations, est.converged, est.history)

