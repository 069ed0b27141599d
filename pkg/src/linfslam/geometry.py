"""Rotations, camera poses and the projection kernels shared by the solvers.

Conventions used throughout the package:

* A pose ``(R, t)`` maps world points into the camera frame, ``x_cam = R X + t``.
  The camera centre is ``C = -R^T t``.
* Image measurements are normalized coordinates (``K^-1`` already applied).
* Stacked unknowns for one measurement are ordered ``[X; t]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _SciRotation

from .exceptions import InvalidRotation, NonPositiveDepth

ORTHO_TOL = 1e-9
DEPTH_EPS = 1e-12


def hat(w):
    """Skew-symmetric matrix of a 3-vector, ``hat(w) @ v == cross(w, v)``."""
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Exponential map; accepts a single rotation vector or an ``(N, 3)`` batch."""
    return _SciRotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(m):
    """Logarithm map; accepts a single matrix or an ``(N, 3, 3)`` batch."""
    return _SciRotation.from_matrix(np.asarray(m, dtype=float)).as_rotvec()


def nearest_rotation(m):
    """Orthogonal polar factor of ``m`` restricted to det = +1."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def angle_between_rotations(a, b):
    """Geodesic distance in radians between two rotation matrices."""
    # log map rather than arccos of the trace: arccos loses ~1e-8 near zero
    return float(np.linalg.norm(so3_log(nearest_rotation(np.asarray(a).T @ np.asarray(b)))))


@dataclass(frozen=True, eq=False)
class Rotation:
    """An element of SO(3), validated on construction and immutable."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidRotation(f"expected a finite 3x3 matrix, got shape {m.shape}")
        if np.linalg.norm(m.T @ m - np.eye(3)) > ORTHO_TOL:
            raise InvalidRotation("matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ORTHO_TOL:
            raise InvalidRotation("determinant is not +1")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def from_matrix(cls, m, project=True):
        return cls(nearest_rotation(m) if project else m)

    @classmethod
    def from_rotvec(cls, w):
        return cls(nearest_rotation(so3_exp(w)))

    @classmethod
    def from_quat(cls, wxyz):
        """Build from a unit quaternion given in scalar-first order."""
        w, x, y, z = np.asarray(wxyz, dtype=float)
        return cls(nearest_rotation(_SciRotation.from_quat([x, y, z, w]).as_matrix()))

    def as_quat(self):
        """Unit quaternion in scalar-first order with non-negative scalar part."""
        x, y, z, w = _SciRotation.from_matrix(self.m).as_quat()
        q = np.array([w, x, y, z])
        return -q if q[0] < 0 else q

    def as_rotvec(self):
        return so3_log(self.m)

    def inv(self):
        return Rotation(self.m.T)

    @property
    def T(self):
        return self.inv()

    def apply(self, v):
        return np.asarray(v, dtype=float) @ self.m.T

    def angle_to(self, other):
        return angle_between_rotations(self.m, _as_matrix(other))

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(nearest_rotation(self.m @ other.m))
        return self.m @ np.asarray(other, dtype=float)

    def __array__(self, dtype=None, copy=None):
        return np.array(self.m, dtype=dtype)

    def __repr__(self):
        return f"Rotation(rotvec={np.round(self.as_rotvec(), 6).tolist()})"


def _as_matrix(r):
    return r.m if isinstance(r, Rotation) else np.asarray(r, dtype=float)


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units; ``identity`` marks K = I."""

    k: np.ndarray
    identity: bool = False

    def __post_init__(self):
        k = np.array(self.k, dtype=float)
        if k.shape != (3, 3) or abs(k[2, 2] - 1.0) > 1e-12:
            raise ValueError("intrinsics must be 3x3 with k[2][2] == 1")
        if np.any(np.abs(np.tril(k, -1)) > 0):
            raise ValueError("intrinsics must be upper triangular")
        if abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics are singular")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "identity", bool(np.allclose(k, np.eye(3), atol=0)))

    @classmethod
    def from_focal(cls, f, cx=0.0, cy=0.0):
        return cls(np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]]))

    @property
    def k_inv(self):
        return np.linalg.inv(self.k)

    def normalize(self, pixels):
        """Map ``(N, 2)`` pixel coordinates to normalized coordinates."""
        p = np.atleast_2d(np.asarray(pixels, dtype=float))
        h = np.column_stack([p, np.ones(len(p))]) @ self.k_inv.T
        return h[:, :2] / h[:, 2:3]

    def to_pixels(self, normalized):
        p = np.atleast_2d(np.asarray(normalized, dtype=float))
        h = np.column_stack([p, np.ones(len(p))]) @ self.k.T
        return h[:, :2] / h[:, 2:3]

    def pixels_to_normalized_distance(self, px):
        """Convert a pixel-unit threshold to normalized units (mean focal length)."""
        return float(px) / (0.5 * (self.k[0, 0] + self.k[1, 1]))


@dataclass(frozen=True, eq=False)
class KeyframePose:
    """Extrinsics ``(r, t)`` of one keyframe; ``c`` is the derived camera centre."""

    r: Rotation
    t: np.ndarray

    def __post_init__(self):
        if not isinstance(self.r, Rotation):
            object.__setattr__(self, "r", Rotation(self.r))
        t = np.array(self.t, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)
        c = -self.r.m.T @ t
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_centre(cls, r, c):
        r = r if isinstance(r, Rotation) else Rotation(r)
        return cls(r, -r.m @ np.asarray(c, dtype=float))

    @classmethod
    def identity(cls):
        return cls(Rotation.identity(), np.zeros(3))

    def matrix(self):
        """The 3x4 matrix ``[R | t]``."""
        return np.column_stack([self.r.m, self.t])

    def depth(self, x):
        return float(self.r.m[2] @ np.asarray(x, dtype=float) + self.t[2])


def _point_coords(x):
    return np.asarray(getattr(x, "x", x), dtype=float).reshape(3)


def project(x, pose):
    """Project a world point into a keyframe, returning normalized coordinates."""
    xw = _point_coords(x)
    p = pose.r.m @ xw + pose.t
    if p[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"depth {p[2]:.3e} is not positive")
    return p[:2] / p[2]


def residual_ratio(x, pose, u):
    """L2 reprojection error of ``x`` in ``pose`` against measurement ``u``."""
    return float(np.linalg.norm(np.asarray(u, dtype=float) - project(x, pose)))


def build_A_b(pose_rotation, u):
    """Constraint blocks for one measurement over the stacked vector ``[X; t]``.

    Returns ``A`` (2x6) and ``b`` (6,) such that for ``v = [X; t]`` the
    reprojection error equals ``|A v| / (b . v)`` whenever ``b . v > 0``.
    """
    r = _as_matrix(pose_rotation)
    u = np.asarray(u, dtype=float).reshape(2)
    s = r[:2] - np.outer(u, r[2])
    a = np.zeros((2, 6))
    a[:, :3] = s
    a[:, 3:5] = np.eye(2)
    a[:, 5] = -u
    b = np.zeros(6)
    b[:3] = r[2]
    b[5] = 1.0
    return a, b


def ray(u):
    """Unit bearing vector(s) for normalized image coordinate(s)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    h = np.column_stack([u, np.ones(len(u))])
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)
