"""Argument checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .exceptions import BadParams, InvalidRotation
from .geometry import KeyframePose, Rotation
from .tracks import FeatureTrack


def check_positive(name, value, allow_zero=False):
    v = float(value)
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise BadParams(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return v


def check_rotations(rotations):
    """Dict of frame id -> :class:`Rotation`; 3x3 arrays are validated and wrapped."""
    if not isinstance(rotations, dict):
        raise TypeError("rotations must be a dict keyed by frame id")
    out = {}
    for f, r in rotations.items():
        if isinstance(r, Rotation):
            out[int(f)] = r
            continue
        m = np.asarray(r, dtype=float)
        if m.shape != (3, 3):
            raise InvalidRotation(f"frame {f}: expected a 3x3 matrix, got shape {m.shape}")
        out[int(f)] = Rotation(m)
    return out


def check_poses(poses):
    if not isinstance(poses, dict) or not all(isinstance(p, KeyframePose) for p in poses.values()):
        raise TypeError("poses must be a dict of frame id -> KeyframePose")
    return poses


def check_tracks(tracks, min_views=1):
    tracks = list(tracks)
    for t in tracks:
        if not isinstance(t, FeatureTrack):
            raise TypeError(f"expected FeatureTrack, got {type(t).__name__}")
        if len(t) < min_views:
            raise BadParams(f"track {t.track_id} has {len(t)} view(s); need {min_views}")
    return tracks


def check_points(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of points, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    return x
