"""Two-view relative motion: essential matrices and rotation-only ray alignment.

Conventions: for corresponding normalized points ``u_j``, ``u_k`` with
homogeneous rays ``x_j``, ``x_k`` the essential matrix satisfies
``x_k^T E x_j = 0`` with ``E = [t]_x R`` and ``x_k ~ R x_j + t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import AmbiguousCheirality, DegenerateConfiguration, InsufficientRays, TooFewInliers
from scipy.optimize import least_squares

from .geometry import Rotation, nearest_rotation, ray, so3_exp

MIN_SAMPLE = 8


@dataclass(frozen=True, eq=False)
class Correspondence:
    u_j: np.ndarray
    u_k: np.ndarray

    def __post_init__(self):
        for name in ("u_j", "u_k"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite correspondence")
            object.__setattr__(self, name, v)


@dataclass(frozen=True, eq=False)
class RelativeMotion:
    """Relative rotation ``r_jk`` and (optional) unit direction of centre k in frame j."""

    r_jk: Rotation
    t_e: np.ndarray | None
    inlier_mask: np.ndarray
    method: str

    def __post_init__(self):
        if self.method not in ("essential", "ray-align"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.t_e is not None:
            t = np.asarray(self.t_e, dtype=float)
            object.__setattr__(self, "t_e", t / np.linalg.norm(t))

    @property
    def n_inliers(self):
        return int(np.sum(self.inlier_mask))


@dataclass
class RelMotionConfig:
    threshold: float = 1e-3
    max_iter: int = 1000
    confidence: float = 0.999
    batch: int = 64
    min_parallax_deg: float = 0.5
    trim_ratio: float = 0.8
    trim_max_iter: int = 50
    seed: int = 0
    refine_rounds: int = 5


def _split(correspondences, u_k=None):
    if u_k is not None:
        return np.asarray(correspondences, dtype=float).reshape(-1, 2), np.asarray(u_k, dtype=float).reshape(-1, 2)
    uj = np.array([c.u_j for c in correspondences]).reshape(-1, 2)
    uk = np.array([c.u_k for c in correspondences]).reshape(-1, 2)
    return uj, uk


def _hartley(u):
    c = u.mean(axis=0)
    d = np.sqrt(np.sum((u - c) ** 2, axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _design(xj, xk):
    # row such that row . vec(E) = x_k^T E x_j with E flattened row-major
    return (xk[..., :, None] * xj[..., None, :]).reshape(*xj.shape[:-1], 9)


def _project_essential(f):
    u, _, vt = np.linalg.svd(f)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def eight_point(u_j, u_k):
    """Normalized linear 8-point estimate projected onto the essential manifold."""
    if len(u_j) < MIN_SAMPLE:
        raise TooFewInliers(f"{len(u_j)} correspondences, need {MIN_SAMPLE}")
    tj, tk = _hartley(u_j), _hartley(u_k)
    xj = np.column_stack([u_j, np.ones(len(u_j))]) @ tj.T
    xk = np.column_stack([u_k, np.ones(len(u_k))]) @ tk.T
    a = _design(xj, xk)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if len(s) < 8 or s[7] <= 1e-12 * s[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    f = vt[-1].reshape(3, 3)
    e = tk.T @ f @ tj
    e = _project_essential(e)
    return e / np.linalg.norm(e)


def _batched_eight_point(u_j, u_k, samples):
    """Essential hypotheses for a batch of minimal samples; rank-deficient ones dropped."""
    sj, sk = u_j[samples], u_k[samples]  # (B, 8, 2)
    cj, ck = sj.mean(axis=1), sk.mean(axis=1)
    dj = np.linalg.norm(sj - cj[:, None], axis=2).mean(axis=1)
    dk = np.linalg.norm(sk - ck[:, None], axis=2).mean(axis=1)
    ok = (dj > 0) & (dk > 0)
    sj, sk, cj, ck, dj, dk = sj[ok], sk[ok], cj[ok], ck[ok], dj[ok], dk[ok]
    B = len(sj)
    if B == 0:
        return np.zeros((0, 3, 3))
    def norm_mats(c, d):
        s = math.sqrt(2.0) / d
        t = np.zeros((B, 3, 3))
        t[:, 0, 0] = s
        t[:, 1, 1] = s
        t[:, 0, 2] = -s * c[:, 0]
        t[:, 1, 2] = -s * c[:, 1]
        t[:, 2, 2] = 1.0
        return t
    tj, tk = norm_mats(cj, dj), norm_mats(ck, dk)
    ones = np.ones((B, MIN_SAMPLE, 1))
    xj = np.einsum("bij,bnj->bni", tj, np.concatenate([sj, ones], axis=2))
    xk = np.einsum("bij,bnj->bni", tk, np.concatenate([sk, ones], axis=2))
    a = _design(xj, xk)  # (B, 8, 9)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    good = s[:, 7] > 1e-12 * s[:, 0]
    f = vt[:, -1].reshape(-1, 3, 3)
    e = np.einsum("bji,bjk,bkl->bil", tk, f, tj)
    u, _, vt2 = np.linalg.svd(e)
    e = u @ (np.array([1.0, 1.0, 0.0])[None, :, None] * vt2)
    e /= np.linalg.norm(e, axis=(1, 2), keepdims=True)
    return e[good]


def sampson_distance(e, u_j, u_k):
    """First-order geometric error of each correspondence; broadcasts over a batch of ``e``."""
    xj = np.column_stack([u_j, np.ones(len(u_j))])
    xk = np.column_stack([u_k, np.ones(len(u_k))])
    e = np.asarray(e)
    ex = np.einsum("...ij,nj->...ni", e, xj)
    etx = np.einsum("...ji,nj->...ni", e, xk)
    num = np.einsum("ni,...ni->...n", xk, ex)
    den = ex[..., 0] ** 2 + ex[..., 1] ** 2 + etx[..., 0] ** 2 + etx[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def estimate_essential(correspondences, ransac_cfg=None, u_k=None, rng=None):
    """RANSAC over the normalized 8-point solver.

    ``correspondences`` is a list of :class:`Correspondence`, or an ``(N, 2)``
    array of ``u_j`` with ``u_k`` given separately.

    Returns ``(E, inlier_mask)``.
    """
    cfg = ransac_cfg or RelMotionConfig()
    u_j, u_k = _split(correspondences, u_k)
    n = len(u_j)
    if n < MIN_SAMPLE:
        raise TooFewInliers(f"{n} correspondences, need {MIN_SAMPLE}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    best_mask, best_count, best_score = None, -1, np.inf
    needed = cfg.max_iter
    done = 0
    while done < min(needed, cfg.max_iter):
        b = min(cfg.batch, cfg.max_iter - done)
        samples = np.argsort(rng.random((b, n)), axis=1)[:, :MIN_SAMPLE]
        done += b
        hyps = _batched_eight_point(u_j, u_k, samples)
        if len(hyps) == 0:
            continue
        d = sampson_distance(hyps, u_j, u_k)
        inl = d < cfg.threshold
        counts = inl.sum(axis=1)
        scores = np.where(inl, d, cfg.threshold).sum(axis=1)
        i = int(np.lexsort((scores, -counts))[0])
        if counts[i] > best_count or (counts[i] == best_count and scores[i] < best_score):
            best_count, best_score, best_mask = int(counts[i]), float(scores[i]), inl[i]
            w = best_count / n
            if w >= 1.0:
                needed = 0
            elif w > 0:
                needed = int(math.ceil(math.log(1 - cfg.confidence) / math.log(1 - w ** MIN_SAMPLE)))
    if best_mask is None:
        raise DegenerateConfiguration("every minimal sample was rank deficient")
    if best_count < MIN_SAMPLE:
        raise TooFewInliers(f"only {best_count} inliers")
    # local optimization: nonlinear refit on the consensus set until it is stable
    mask = best_mask
    e = eight_point(u_j[mask], u_k[mask])
    for _ in range(cfg.refine_rounds):
        e = refine_essential(e, u_j[mask], u_k[mask])
        new_mask = sampson_distance(e, u_j, u_k) < cfg.threshold
        if new_mask.sum() < MIN_SAMPLE or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    mask = sampson_distance(e, u_j, u_k) < cfg.threshold
    if mask.sum() < MIN_SAMPLE:
        raise TooFewInliers(f"only {int(mask.sum())} inliers after refit")
    return e, mask


def _signed_sampson(e, xj, xk):
    ex = xj @ e.T
    etx = xk @ e
    num = np.sum(xk * ex, axis=1)
    den = ex[:, 0] ** 2 + ex[:, 1] ** 2 + etx[:, 0] ** 2 + etx[:, 1] ** 2
    return num / np.sqrt(np.maximum(den, 1e-300))


def refine_essential(e, u_j, u_k):
    """Gauss-Newton polish of ``E = [t]_x R`` on the Sampson error of the given pairs.

    The rotation is updated on the manifold and the unit translation in its
    tangent plane, five parameters in all.
    """
    if len(u_j) < MIN_SAMPLE:
        return e
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r0, t0 = u @ w @ vt, u[:, 2]
    basis = np.linalg.svd(t0[None, :])[2][1:]  # rows span the tangent plane of t0
    xj = np.column_stack([u_j, np.ones(len(u_j))])
    xk = np.column_stack([u_k, np.ones(len(u_k))])

    def compose(p):
        t = t0 + basis.T @ p[3:]
        return essential_from_motion(so3_exp(p[:3]) @ r0, t / np.linalg.norm(t))

    sol = least_squares(lambda p: _signed_sampson(compose(p), xj, xk), np.zeros(5), method="lm")
    out = compose(sol.x)
    if np.sum(_signed_sampson(out, xj, xk) ** 2) > np.sum(_signed_sampson(e, xj, xk) ** 2):
        return e
    return out / np.linalg.norm(out)


def essential_from_motion(r, t):
    """``[t]_x R`` for the motion ``x_k = R x_j + t``."""
    t = np.asarray(t, dtype=float)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    return tx @ np.asarray(r, dtype=float)


def _depths(r, t, xj, xk):
    """Depths ``(l_j, l_k)`` with ``l_k x_k = l_j R x_j + t`` in least squares."""
    a = np.einsum("ij,nj->ni", r, xj)
    # solve [a, -x_k] [l_j; l_k] = -t per point via 2x2 normal equations
    aa = np.sum(a * a, axis=1)
    bb = np.sum(xk * xk, axis=1)
    ab = np.sum(a * xk, axis=1)
    at = a @ t
    bt = xk @ t
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        lj = (-bb * at + ab * bt) / det
        lk = (aa * bt - ab * at) / det
    return lj, lk


def decompose_essential(e, correspondences, u_k=None, mask=None):
    """Pick the ``(R, t)`` factorization of ``e`` with the most points in front of both cameras."""
    u_j, u_k = _split(correspondences, u_k)
    if mask is not None:
        u_j, u_k = u_j[mask], u_k[mask]
    if len(u_j) == 0:
        raise InsufficientRays("no correspondences to test cheirality")
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=float))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    xj = np.column_stack([u_j, np.ones(len(u_j))])
    xk = np.column_stack([u_k, np.ones(len(u_k))])
    cands = []
    for r in (u @ w @ vt, u @ w.T @ vt):
        for s in (1.0, -1.0):
            lj, lk = _depths(r, s * t, xj, xk)
            votes = int(np.sum((lj > 0) & (lk > 0)))
            cands.append((votes, r, s * t))
    cands.sort(key=lambda c: -c[0])
    votes, r, tt = cands[0]
    if votes * 2 <= len(u_j) or votes == cands[1][0]:
        raise AmbiguousCheirality(f"best factorization has {votes} of {len(u_j)} cheirality votes")
    full_mask = np.ones(len(u_j), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    t_e = -r.T @ tt
    return RelativeMotion(Rotation.from_matrix(r), t_e / np.linalg.norm(t_e), full_mask, "essential")


def rotation_align_trimmed(rays_j, rays_k, trim_ratio=0.8, max_iter=50, return_history=False):
    """Rotation ``R`` minimizing the trimmed sum of ``|ray_k - R ray_j|^2``.

    Alternates a closed-form alignment on the kept pairs with re-selecting
    the best ``ceil(trim_ratio * N)`` pairs until the kept set is stable.
    """
    a = np.asarray(rays_j, dtype=float).reshape(-1, 3)
    b = np.asarray(rays_k, dtype=float).reshape(-1, 3)
    if len(a) != len(b):
        raise ValueError("ray sets differ in length")
    if len(a) < 3:
        raise InsufficientRays(f"{len(a)} ray pairs, need 3")
    if not 0.0 < trim_ratio <= 1.0:
        raise ValueError("trim_ratio must lie in (0, 1]")
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    keep_n = max(3, int(math.ceil(trim_ratio * len(a))))
    keep = np.arange(len(a))
    r = np.eye(3)
    history = []
    for _ in range(max_iter):
        r = nearest_rotation(b[keep].T @ a[keep])
        res = np.sum((b - a @ r.T) ** 2, axis=1)
        new_keep = np.sort(np.argsort(res, kind="stable")[:keep_n])
        obj = float(res[new_keep].sum())
        if history and obj > history[-1] + 1e-12 * max(1.0, history[-1]):
            raise AssertionError("trimmed objective increased")
        history.append(obj)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    rot = Rotation.from_matrix(r)
    return (rot, history) if return_history else rot


def median_parallax(r, u_j, u_k):
    """Median angle (radians) between ``R ray_j`` and ``ray_k``."""
    a = ray(u_j) @ np.asarray(r).T
    b = ray(u_k)
    c = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    return float(np.median(np.arccos(c)))


def estimate_relative(u_j, u_k, cfg=None):
    """Relative motion between two frames from their shared measurements.

    Tries the essential-matrix path; falls back to trimmed ray alignment when
    the median parallax is below ``cfg.min_parallax_deg`` or the cheirality
    vote is ambiguous.
    """
    cfg = cfg or RelMotionConfig()
    u_j = np.asarray(u_j, dtype=float).reshape(-1, 2)
    u_k = np.asarray(u_k, dtype=float).reshape(-1, 2)
    if len(u_j) == 0:
        raise InsufficientRays("no shared tracks")
    try:
        e, mask = estimate_essential(u_j, cfg, u_k=u_k)
        motion = decompose_essential(e, u_j, u_k=u_k, mask=mask)
        if median_parallax(motion.r_jk.m, u_j[mask], u_k[mask]) >= np.deg2rad(cfg.min_parallax_deg):
            return RelativeMotion(motion.r_jk, motion.t_e, mask, "essential")
    except (AmbiguousCheirality, DegenerateConfiguration, TooFewInliers):
        pass
    r = rotation_align_trimmed(ray(u_j), ray(u_k), cfg.trim_ratio, cfg.trim_max_iter)
    res = np.linalg.norm(ray(u_k) - ray(u_j) @ r.m.T, axis=1)
    keep_n = max(3, int(math.ceil(cfg.trim_ratio * len(res))))
    mask = np.zeros(len(res), dtype=bool)
    mask[np.argsort(res, kind="stable")[:keep_n]] = True
    return RelativeMotion(r, None, mask, "ray-align")
