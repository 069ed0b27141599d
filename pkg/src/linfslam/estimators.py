"""scikit-learn style wrappers around the functional solvers.

Only ``fit``/``transform``/``predict`` and parameter handling are provided;
the solvers themselves stay plain functions.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import CovisibilityGraph
from .krot import GaugeConfig, build_krot, solve_krot, triangulate_point_linf
from .metrics import align_similarity
from .rotavg import RotAvgConfig, irls_rotation_average, spanning_tree_init
from .validation import check_points, check_poses, check_positive, check_rotations, check_tracks


class RotationAveraging(BaseEstimator):
    """Robust chordal rotation averaging over a covisibility graph."""

    def __init__(self, loss="cauchy", sigma_deg=5.0, max_iter=300, tol=1e-8):
        self.loss = loss
        self.sigma_deg = sigma_deg
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, graph, init=None):
        if not isinstance(graph, CovisibilityGraph):
            raise TypeError("graph must be a CovisibilityGraph")
        cfg = RotAvgConfig(loss=self.loss, sigma_deg=check_positive("sigma_deg", self.sigma_deg),
                           max_iter=self.max_iter, tol=self.tol)
        init = spanning_tree_init(graph) if init is None else check_rotations(init)
        est = irls_rotation_average(graph, init, cfg)
        self.rotations_ = est.rotations
        self.cost_ = est.cost
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        return self

    def predict(self, frames=None):
        """Stacked rotation matrices for ``frames`` (all fitted frames by default)."""
        check_is_fitted(self, "rotations_")
        frames = sorted(self.rotations_) if frames is None else list(frames)
        return np.stack([self.rotations_[f].m for f in frames])


class KnownRotationSolver(BaseEstimator):
    """Globally optimal translations and structure for given rotations."""

    def __init__(self, tol=1e-6, fixed_frame=None):
        self.tol = tol
        self.fixed_frame = fixed_frame

    def fit(self, tracks, rotations):
        tracks = check_tracks(tracks, min_views=2)
        rotations = check_rotations(rotations)
        problem = build_krot(rotations, tracks, GaugeConfig(fixed_frame=self.fixed_frame))
        sol = solve_krot(problem, check_positive("tol", self.tol))
        self.solution_ = sol
        self.gamma_star_ = sol.gamma_star
        self.poses_ = sol.poses()
        self.points_ = {t: p.x for t, p in sol.points.items()}
        return self

    def predict(self, track_ids=None):
        """Point coordinates for ``track_ids`` as an ``(n, 3)`` array."""
        check_is_fitted(self, "points_")
        ids = sorted(self.points_) if track_ids is None else list(track_ids)
        return np.array([self.points_[t] for t in ids]).reshape(-1, 3)


class Triangulator(BaseEstimator, TransformerMixin):
    """L-infinity triangulation of tracks against fixed poses."""

    def __init__(self, tol=1e-6):
        self.tol = tol

    def fit(self, poses, y=None):
        self.poses_ = check_poses(poses)
        return self

    def transform(self, tracks):
        check_is_fitted(self, "poses_")
        tracks = check_tracks(tracks, min_views=2)
        out = np.full((len(tracks), 3), np.nan)
        for i, t in enumerate(tracks):
            out[i] = triangulate_point_linf(t, self.poses_, self.tol)[0].x
        return out


class SimilarityAligner(BaseEstimator, TransformerMixin):
    """Fits the similarity taking estimated camera centres onto ground truth."""

    def fit(self, est_poses, gt_poses):
        frames = sorted(gt_poses)
        sim, _, _ = align_similarity({f: est_poses[f] for f in frames}, {f: gt_poses[f] for f in frames})
        self.scale_, self.rotation_, self.translation_ = sim.s, sim.r, sim.d
        self.flagged_ = sim.flagged
        self.similarity_ = sim
        return self

    def transform(self, points):
        check_is_fitted(self, "similarity_")
        return self.similarity_.apply_points(check_points(points))
