"""Measurement containers: observations, feature tracks and map points."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Observation:
    track_id: int
    frame_id: int
    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float).reshape(2)
        if not np.all(np.isfinite(u)):
            raise ValueError(f"non-finite measurement for track {self.track_id}")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "track_id", int(self.track_id))
        object.__setattr__(self, "frame_id", int(self.frame_id))


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    """All observations of one scene point, ordered by frame id."""

    track_id: int
    observations: tuple

    def __post_init__(self):
        obs = tuple(self.observations)
        frames = [o.frame_id for o in obs]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"track {self.track_id}: frame ids must be strictly increasing")
        if any(o.track_id != self.track_id for o in obs):
            raise ValueError(f"track {self.track_id}: observation with foreign track id")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "track_id", int(self.track_id))

    @classmethod
    def from_arrays(cls, track_id, frame_ids, us):
        us = np.asarray(us, dtype=float).reshape(-1, 2)
        return cls(track_id, tuple(Observation(track_id, f, u) for f, u in zip(frame_ids, us)))

    @property
    def frame_ids(self):
        return [o.frame_id for o in self.observations]

    def __len__(self):
        return len(self.observations)

    def restrict(self, frames):
        """Copy holding only the observations made in ``frames``."""
        keep = set(frames)
        return FeatureTrack(self.track_id, tuple(o for o in self.observations if o.frame_id in keep))

    def measurement(self, frame_id):
        for o in self.observations:
            if o.frame_id == frame_id:
                return o.u
        raise KeyError(frame_id)


@dataclass(frozen=True, eq=False)
class MapPoint:
    x: np.ndarray
    track_id: int

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(3)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite map point for track {self.track_id}")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "track_id", int(self.track_id))


def tracks_from_observations(observations):
    """Group loose observations into tracks sorted by track id."""
    by_track = defaultdict(list)
    for o in observations:
        by_track[o.track_id].append(o)
    return [
        FeatureTrack(tid, tuple(sorted(obs, key=lambda o: o.frame_id)))
        for tid, obs in sorted(by_track.items())
    ]


class ObservationTable:
    """Per-frame index over a track list for fast pair queries.

    Built once from the track list; lookups return numpy arrays sorted by
    track id.
    """

    def __init__(self, tracks):
        per_frame = defaultdict(lambda: ([], []))
        self.tracks = {t.track_id: t for t in tracks}
        for t in tracks:
            for o in t.observations:
                ids, us = per_frame[o.frame_id]
                ids.append(t.track_id)
                us.append(o.u)
        self._frames = {}
        for f, (ids, us) in per_frame.items():
            ids = np.asarray(ids, dtype=np.int64)
            us = np.asarray(us, dtype=float).reshape(-1, 2)
            order = np.argsort(ids, kind="stable")
            self._frames[f] = (ids[order], us[order])

    @property
    def frame_ids(self):
        return sorted(self._frames)

    def frame(self, frame_id):
        """Track ids and measurements seen in ``frame_id``."""
        return self._frames.get(frame_id, (np.zeros(0, dtype=np.int64), np.zeros((0, 2))))

    def shared(self, j, k):
        """Track ids seen in both frames with their measurements in each."""
        ids_j, u_j = self.frame(j)
        ids_k, u_k = self.frame(k)
        common, ij, ik = np.intersect1d(ids_j, ids_k, assume_unique=True, return_indices=True)
        return common, u_j[ij], u_k[ik]

    def n_shared(self, j, k):
        return len(np.intersect1d(self.frame(j)[0], self.frame(k)[0], assume_unique=True))

    def tracks_in(self, frames, min_views=2):
        """Tracks restricted to ``frames`` keeping those with ``min_views`` views."""
        out = []
        frames = set(frames)
        for tid in sorted(self.tracks):
            t = self.tracks[tid]
            obs = tuple(o for o in t.observations if o.frame_id in frames)
            if len(obs) >= min_views:
                out.append(FeatureTrack(tid, obs))
        return out
