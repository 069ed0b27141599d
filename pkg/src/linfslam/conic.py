"""Second-order-cone feasibility engine and bisection over the level parameter.

A feasibility question "does some ``x`` satisfy every constraint?" is answered
by solving the slack program

    minimize    s
    subject to  |A_k x + a0_k| <= b_k . x + beta_k + s     (second-order cones)
                g_l . x + s >= h_l                         (linear constraints)
                s >= -s_floor,  |x_i| <= box

with a primal-dual interior-point method (Nesterov-Todd scaling, Mehrotra
predictor-corrector). The run stops as soon as either certificate is
available:

* feasible: the current ``x`` satisfies every original constraint strictly
  when evaluated directly;
* infeasible: the dual iterate, rescaled to cancel the slack column, proves a
  positive lower bound on ``s`` over the box.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .exceptions import BadBracket, NumericalFailure, ProbeViolatesLinear

GAP_TOL = 1e-9
MAX_ITER = 200
DEFAULT_BOX = 1e4
STALL_ITERS = 8
REFINE_STEPS = 3
STALL_TOL = 1e-6

log = logging.getLogger(__name__)


@dataclass
class ConeConstraint:
    """``|a_mat @ x + a0| <= b @ x + beta``."""

    a_mat: np.ndarray
    a0: np.ndarray
    b: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        if not sp.issparse(self.a_mat):
            self.a_mat = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        self.a0 = np.asarray(self.a0, dtype=float).reshape(-1)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.beta = float(self.beta)
        m, n = self.a_mat.shape
        if m < 1 or len(self.a0) != m or len(self.b) != n:
            raise ValueError("inconsistent cone constraint dimensions")

    def slack(self, x):
        return float(self.b @ x + self.beta - np.linalg.norm(self.a_mat @ x + self.a0))


@dataclass
class LinearConstraint:
    """``g @ x >= h``."""

    g: np.ndarray
    h: float

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        self.h = float(self.h)


class ConicSystem:
    """A stacked set of cone and linear constraints over ``x`` in R^n.

    Cone ``k`` reads ``|body_k x + body0_k| <= head_k . x + head0_k`` where
    ``body_k`` is the block of ``dims[k]`` consecutive rows of ``body``.
    """

    def __init__(self, n, head, head0, body, body0, dims, lin_g=None, lin_h=None):
        self.n = int(n)
        self.head = sp.csr_matrix(head, shape=(len(dims), n))
        self.head0 = np.asarray(head0, dtype=float).reshape(-1)
        self.body = sp.csr_matrix(body, shape=(int(np.sum(dims)), n))
        self.body0 = np.asarray(body0, dtype=float).reshape(-1)
        self.dims = np.asarray(dims, dtype=np.int64).reshape(-1)
        if lin_g is None:
            lin_g = sp.csr_matrix((0, n))
            lin_h = np.zeros(0)
        self.lin_g = sp.csr_matrix(lin_g, shape=(len(lin_h), n))
        self.lin_h = np.asarray(lin_h, dtype=float).reshape(-1)
        self._offsets = np.concatenate([[0], np.cumsum(self.dims)])

    @classmethod
    def from_constraints(cls, cones, linears=(), n=None):
        cones, linears = list(cones), list(linears)
        if n is None:
            n = cones[0].a_mat.shape[1] if cones else len(linears[0].g)
        for c in cones:
            if c.a_mat.shape[1] != n:
                raise ValueError("cone constraints disagree on the variable dimension")
        for lc in linears:
            if len(lc.g) != n:
                raise ValueError("linear constraints disagree on the variable dimension")
        head = sp.vstack([sp.csr_matrix(c.b.reshape(1, -1)) for c in cones]) if cones else sp.csr_matrix((0, n))
        body = sp.vstack([sp.csr_matrix(c.a_mat) for c in cones]) if cones else sp.csr_matrix((0, n))
        body0 = np.concatenate([c.a0 for c in cones]) if cones else np.zeros(0)
        lin_g = sp.vstack([sp.csr_matrix(l.g.reshape(1, -1)) for l in linears]) if linears else None
        lin_h = np.array([l.h for l in linears]) if linears else None
        return cls(n, head, [c.beta for c in cones], body, body0, [c.a_mat.shape[0] for c in cones], lin_g, lin_h)

    @property
    def n_cones(self):
        return len(self.dims)

    def cone_norms(self, x):
        r = self.body @ x + self.body0
        return np.sqrt(np.add.reduceat(r * r, self._offsets[:-1])) if len(r) else np.zeros(0)

    def cone_slacks(self, x):
        """Per-cone margin ``head . x + head0 - |body x + body0|`` (>= 0 when satisfied)."""
        if self.n_cones == 0:
            return np.zeros(0)
        return self.head @ x + self.head0 - self.cone_norms(x)

    def linear_slacks(self, x):
        return self.lin_g @ x - self.lin_h

    def max_violation(self, x):
        """Smallest ``s`` for which ``x`` satisfies the slack program."""
        parts = [-self.cone_slacks(x), -self.linear_slacks(x)]
        vals = np.concatenate(parts)
        return float(vals.max()) if len(vals) else -np.inf

    def scale(self):
        parts = [np.abs(self.head0), np.abs(self.body0), np.abs(self.lin_h)]
        vals = np.concatenate(parts)
        return float(max(1.0, vals.max() if len(vals) else 1.0))

    def dump(self, fh):
        """Write the system in the plain-text exchange format (see ``load_system``)."""
        head = self.head.toarray()
        body = self.body.toarray()
        lin = self.lin_g.toarray()
        fh.write(f"n {self.n}\ncones {self.n_cones}\nlinears {len(self.lin_h)}\n")
        fmt = lambda v: " ".join(f"{x:.17g}" for x in v)
        for k in range(self.n_cones):
            lo, hi = self._offsets[k], self._offsets[k + 1]
            fh.write(f"cone {self.dims[k]}\n")
            fh.write(f"b {fmt(head[k])}\nbeta {self.head0[k]:.17g}\n")
            for r in range(lo, hi):
                fh.write(f"a {fmt(body[r])} {self.body0[r]:.17g}\n")
        for l in range(len(self.lin_h)):
            fh.write(f"linear {fmt(lin[l])} {self.lin_h[l]:.17g}\n")


def load_system(fh):
    """Read a system written by :meth:`ConicSystem.dump`."""
    lines = [ln.split() for ln in fh.read().splitlines() if ln.strip()]
    n = int(lines[0][1])
    cones, linears = [], []
    i = 3
    while i < len(lines):
        tag = lines[i][0]
        if tag == "cone":
            m = int(lines[i][1])
            b = np.array(lines[i + 1][1:], dtype=float)
            beta = float(lines[i + 2][1])
            rows = np.array([ln[1:] for ln in lines[i + 3:i + 3 + m]], dtype=float)
            cones.append(ConeConstraint(rows[:, :n], rows[:, n], b, beta))
            i += 3 + m
        elif tag == "linear":
            vals = np.array(lines[i][1:], dtype=float)
            linears.append(LinearConstraint(vals[:n], vals[n]))
            i += 1
        else:
            raise ValueError(f"unexpected record {tag!r}")
    return ConicSystem.from_constraints(cones, linears, n=n)


@dataclass
class FeasibilityResult:
    """Outcome of one feasibility test.

    ``certified`` is False only when the interior-point run converged to a
    slack indistinguishable from zero; such a result is reported infeasible.
    ``cone_duals`` holds the leading dual multiplier of each cone, rescaled to
    sum to one, and is set for infeasible outcomes; large entries mark the
    constraints responsible for the infeasibility.
    """

    feasible: bool
    x: np.ndarray | None
    slack: float
    lower_bound: float
    certified: bool
    iterations: int
    cone_duals: np.ndarray | None = None

    def __bool__(self):
        return self.feasible


def _jdet(b):
    """``b0^2 - |b1|^2`` per row, factored to avoid cancellation near the boundary."""
    n1 = np.linalg.norm(b[:, 1:], axis=1)
    return (b[:, 0] - n1) * (b[:, 0] + n1)


class _ProductCone:
    """Bookkeeping for R_+^p x SOC(d_1) x ... with SOCs grouped by dimension."""

    def __init__(self, p, groups):
        self.p = p
        self.groups = groups  # list of (d, start, count)
        self.degree = p + sum(cnt for _, _, cnt in groups)
        self.size = p + sum(d * cnt for d, _, cnt in groups)

    def blocks(self, v):
        for d, start, cnt in self.groups:
            yield v[start:start + d * cnt].reshape(cnt, d)

    def identity(self):
        e = np.zeros(self.size)
        e[: self.p] = 1.0
        for blk in self.blocks(e):
            blk[:, 0] = 1.0
        return e

    def jprod(self, x, y):
        out = np.empty_like(x)
        out[: self.p] = x[: self.p] * y[: self.p]
        for bx, by, bo in zip(self.blocks(x), self.blocks(y), self.blocks(out)):
            bo[:, 0] = np.sum(bx * by, axis=1)
            bo[:, 1:] = bx[:, :1] * by[:, 1:] + by[:, :1] * bx[:, 1:]
        return out

    def jsolve(self, x, r):
        """Solve ``x o d = r`` for ``d``."""
        out = np.empty_like(r)
        out[: self.p] = r[: self.p] / x[: self.p]
        for bx, br, bo in zip(self.blocks(x), self.blocks(r), self.blocks(out)):
            x0, x1 = bx[:, 0], bx[:, 1:]
            det = _jdet(bx)
            d0 = (x0 * br[:, 0] - np.sum(x1 * br[:, 1:], axis=1)) / det
            bo[:, 0] = d0
            bo[:, 1:] = (br[:, 1:] - d0[:, None] * x1) / x0[:, None]
        return out

    def min_eig(self, v):
        vals = [v[: self.p]] if self.p else []
        for b in self.blocks(v):
            vals.append(b[:, 0] - np.linalg.norm(b[:, 1:], axis=1))
        vals = np.concatenate(vals) if vals else np.zeros(0)
        return float(vals.min()) if len(vals) else 1.0

    def max_step(self, u, du):
        """Largest ``a`` with ``u + a du`` in the cone (``u`` interior)."""
        amax = np.inf
        neg = du[: self.p] < 0
        if np.any(neg):
            amax = min(amax, float(np.min(-u[: self.p][neg] / du[: self.p][neg])))
        for bu, bd in zip(self.blocks(u), self.blocks(du)):
            qa = bd[:, 0] ** 2 - np.sum(bd[:, 1:] ** 2, axis=1)
            qb = 2.0 * (bu[:, 0] * bd[:, 0] - np.sum(bu[:, 1:] * bd[:, 1:], axis=1))
            qc = _jdet(bu)
            disc = qb * qb - 4.0 * qa * qc
            roots = np.full(len(qa), np.inf)
            has = disc >= 0
            sq = np.sqrt(np.where(has, disc, 0.0))
            # numerically stable quadratic roots
            qq = -0.5 * (qb + np.copysign(sq, qb))
            with np.errstate(divide="ignore", invalid="ignore"):
                r1 = np.where(qa != 0, qq / qa, np.inf)
                r2 = np.where(qq != 0, qc / qq, np.inf)
            for r in (r1, r2):
                ok = has & np.isfinite(r) & (r > 0)
                roots = np.where(ok, np.minimum(roots, r), roots)
            if len(roots):
                amax = min(amax, float(roots.min()))
        return amax


class _NTScaling:
    """Nesterov-Todd scaling ``W`` with ``W lam = W^-1 z`` for the product cone."""

    def __init__(self, cone, z, lam):
        self.cone = cone
        p = cone.p
        self.w = np.sqrt(z[:p] / lam[:p])
        self.mats, self.imats = [], []
        for bz, bl in zip(cone.blocks(z), cone.blocks(lam)):
            zjz = _jdet(bz)
            ljl = _jdet(bl)
            if np.any(zjz <= 0) or np.any(ljl <= 0):
                raise NumericalFailure("iterate left the cone interior")
            zb = bz / np.sqrt(zjz)[:, None]
            lb = bl / np.sqrt(ljl)[:, None]
            gam = np.sqrt((1.0 + np.sum(zb * lb, axis=1)) / 2.0)
            wb = zb.copy()
            wb[:, 0] += lb[:, 0]
            wb[:, 1:] -= lb[:, 1:]
            wb /= (2.0 * gam)[:, None]
            eta = (zjz / ljl) ** 0.25
            cnt, d = bz.shape
            w0, w1 = wb[:, 0], wb[:, 1:]
            core = np.zeros((cnt, d, d))
            core[:, 1:, 1:] = np.eye(d - 1) + np.einsum("ki,kj->kij", w1, w1) / (1.0 + w0)[:, None, None]
            mat = core.copy()
            mat[:, 0, 0] = w0
            mat[:, 0, 1:] = w1
            mat[:, 1:, 0] = w1
            imat = core
            imat[:, 0, 0] = w0
            imat[:, 0, 1:] = -w1
            imat[:, 1:, 0] = -w1
            self.mats.append(mat * eta[:, None, None])
            self.imats.append(imat / eta[:, None, None])

    def _apply(self, v, mats, diag):
        out = np.empty_like(v)
        out[: self.cone.p] = diag * v[: self.cone.p]
        for m, bv, bo in zip(mats, self.cone.blocks(v), self.cone.blocks(out)):
            bo[:] = np.einsum("kij,kj->ki", m, bv)
        return out

    def W(self, v):
        return self._apply(v, self.mats, self.w)

    def Winv(self, v):
        return self._apply(v, self.imats, 1.0 / self.w)

    def winv2_blocks(self):
        """Data of the block-diagonal ``W^-2`` in CSR order."""
        parts = [1.0 / self.w ** 2]
        for im in self.imats:
            parts.append(np.einsum("kij,kjl->kil", im, im).reshape(-1))
        return np.concatenate(parts)


class _SlackProgram:
    """The slack program for a :class:`ConicSystem` in standard conic form.

    Variables ``y = [x; s]``; constraints ``G y + z = h`` with ``z`` in the
    product cone; objective ``s``.
    """

    def __init__(self, system, box, s_floor):
        self.system = system
        n = system.n
        self.n = n
        L = len(system.lin_h)
        ones = lambda m: sp.csr_matrix(np.ones((m, 1)))
        # orthant rows: linears, slack floor, box upper, box lower
        eye = sp.identity(n, format="csr")
        g_orth = sp.vstack([
            sp.hstack([-system.lin_g, -ones(L)]),
            sp.csr_matrix(np.r_[np.zeros(n), -1.0].reshape(1, -1)),
            sp.hstack([eye, sp.csr_matrix((n, 1))]),
            sp.hstack([-eye, sp.csr_matrix((n, 1))]),
        ])
        h_orth = np.concatenate([-system.lin_h, [s_floor], np.full(n, box), np.full(n, box)])
        p = g_orth.shape[0]
        # cones grouped by dimension, each stored as [head; body]
        dims = system.dims
        offs = system._offsets
        order = np.argsort(dims, kind="stable")
        rows_g, rows_h, groups = [], [], []
        start = p
        self.cone_order = order
        self.cone_rows = np.zeros(len(dims), dtype=np.int64)
        head = system.head
        body = system.body
        if len(dims):
            uniq = np.unique(dims[order])
            for d in uniq:
                ks = order[dims[order] == d]
                # row index list into a combined [head; body] matrix
                idx = np.empty((len(ks), d + 1), dtype=np.int64)
                idx[:, 0] = ks
                idx[:, 1:] = len(dims) + offs[ks][:, None] + np.arange(d)[None, :]
                self.cone_rows[ks] = start + (d + 1) * np.arange(len(ks))
                groups.append((int(d) + 1, start, len(ks)))
                start += (d + 1) * len(ks)
                rows_g.append(idx.reshape(-1))
            hb = sp.vstack([head, body]).tocsr()
            hb0 = np.concatenate([system.head0, system.body0])
            sel = np.concatenate(rows_g)
            is_head = np.zeros(hb.shape[0], dtype=bool)
            is_head[: len(dims)] = True
            g_cone_x = -hb[sel]
            s_col = -is_head[sel].astype(float)
            g_cone = sp.hstack([g_cone_x, sp.csr_matrix(s_col.reshape(-1, 1))])
            h_cone = hb0[sel]
            self.G = sp.vstack([g_orth, g_cone]).tocsr()
            self.h = np.concatenate([h_orth, h_cone])
        else:
            self.G = g_orth.tocsr()
            self.h = h_orth
        self.cone = _ProductCone(p, groups)
        self.c = np.zeros(n + 1)
        self.c[-1] = 1.0
        self.GT = self.G.T.tocsr()
        self.box = box
        self.s_floor = s_floor
        self._blk = self._block_pattern()

    def _block_pattern(self):
        cone = self.cone
        rows, cols = [np.arange(cone.p)], [np.arange(cone.p)]
        for d, start, cnt in cone.groups:
            base = start + d * np.arange(cnt)
            r = base[:, None, None] + np.arange(d)[None, :, None] + np.zeros((1, 1, d), dtype=np.int64)
            c = base[:, None, None] + np.arange(d)[None, None, :] + np.zeros((1, d, 1), dtype=np.int64)
            rows.append(r.reshape(-1))
            cols.append(c.reshape(-1))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        m = sp.csr_matrix((np.arange(len(rows), dtype=float) + 1.0, (rows, cols)), shape=(cone.size, cone.size))
        # permutation from block-major data order to CSR storage order
        perm = (m.data - 1.0).astype(np.int64)
        m.data = np.zeros(len(perm))
        return m, perm

    def normal_matrix(self, scaling):
        blk, perm = self._blk
        data = scaling.winv2_blocks()
        blk.data = data[perm]
        h = (self.GT @ (blk @ self.G)).toarray()
        return h, blk

    def lower_bound(self, lam):
        """Certified lower bound on ``s`` over the box from a dual point."""
        gtl = self.GT @ lam
        total = -gtl[-1]
        if total <= 0:
            return -np.inf
        kappa = 1.0 / total
        return float(-kappa * (self.h @ lam) - self.box * kappa * np.abs(gtl[:-1]).sum())


def _factor(h):
    scale = max(1.0, float(np.max(np.abs(np.diag(h)))))
    for reg in (0.0, 1e-14, 1e-12, 1e-10):
        try:
            return scipy.linalg.cho_factor(h + reg * scale * np.eye(len(h)), check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise NumericalFailure("normal equations are not positive definite")


def check_feasibility(cones, linears=(), tol=GAP_TOL, *, box=DEFAULT_BOX, s_floor=1.0, max_iter=MAX_ITER):
    """Decide whether a system of cone and linear constraints is feasible.

    Parameters
    ----------
    cones : ConicSystem or sequence of ConeConstraint
    linears : sequence of LinearConstraint, ignored when ``cones`` is a system
    tol : duality-gap tolerance of the inner interior-point solve
    box : bound on ``|x_i|``; feasibility is decided within this box

    Returns
    -------
    FeasibilityResult
    """
    system = cones if isinstance(cones, ConicSystem) else ConicSystem.from_constraints(cones, linears)
    prog = _SlackProgram(system, box, s_floor)
    cone = prog.cone
    G, GT, h, c = prog.G, prog.GT, prog.h, prog.c
    n = system.n
    scale = system.scale()

    # cold start: least-squares primal point and min-norm dual point, shifted inside
    h0 = (GT @ G).toarray()
    fac = _factor(h0)
    y = scipy.linalg.cho_solve(fac, GT @ h)
    z = h - G @ y
    lam = -(G @ scipy.linalg.cho_solve(fac, c))
    e = cone.identity()
    for v in (z, lam):
        shift = -cone.min_eig(v)
        if shift >= -1e-8 * max(1.0, np.linalg.norm(v)):
            v += (1.0 + shift) * e

    best_lb = -np.inf
    best_merit, best_it = np.inf, 0
    for it in range(max_iter):
        x = y[:n]
        viol = system.max_violation(x)
        if viol < 0:
            return FeasibilityResult(True, x.copy(), viol, best_lb, True, it)
        lb = prog.lower_bound(lam)
        best_lb = max(best_lb, lb)
        if lb > 0:
            return FeasibilityResult(False, None, viol, lb, True, it, _cone_duals(prog, lam))

        r_d = GT @ lam + c
        r_p = G @ y + z - h
        gap = float(z @ lam)
        pres = np.linalg.norm(r_p) / max(1.0, np.linalg.norm(h))
        dres = np.linalg.norm(r_d)
        log.debug("it=%d viol=%.3e lb=%.3e gap=%.3e pres=%.3e dres=%.3e", it, viol, lb, gap, pres, dres)
        if gap <= tol * scale and pres <= tol and dres <= tol:
            # converged with |s*| below resolution: report infeasible, uncertified
            return FeasibilityResult(False, None, viol, best_lb, False, it, _cone_duals(prog, lam))
        merit = gap / scale + pres + dres
        if merit < 0.5 * best_merit:
            best_merit, best_it = merit, it
        elif it - best_it >= STALL_ITERS:
            if best_merit <= STALL_TOL:
                # precision floor reached near the optimum; the primal point
                # still violates, so s* > 0 up to solver resolution
                return FeasibilityResult(False, None, viol, best_lb, False, it, _cone_duals(prog, lam))
            raise NumericalFailure(f"interior-point iterations stalled at iteration {it}")

        mu = gap / cone.degree
        scaling = _NTScaling(cone, z, lam)
        xi = scaling.W(lam)
        hmat, blk = prog.normal_matrix(scaling)
        fac = _factor(hmat)

        def newton(ds):
            wd = scaling.Winv(ds)
            rhs = -r_d - GT @ (blk @ r_p + wd)
            dy = scipy.linalg.cho_solve(fac, rhs)
            rnorm = np.linalg.norm(rhs)
            for _ in range(REFINE_STEPS):
                res = rhs - hmat @ dy
                if np.linalg.norm(res) <= 1e-15 * rnorm:
                    break
                dy += scipy.linalg.cho_solve(fac, res)
            dlam = blk @ (G @ dy + r_p) + wd
            dz = scaling.W(ds - scaling.W(dlam))
            return dy, dz, dlam

        dya, dza, dla = newton(-xi)
        a_aff = min(1.0, cone.max_step(z, dza), cone.max_step(lam, dla))
        sigma = (1.0 - a_aff) ** 3
        corr = cone.jprod(scaling.Winv(dza), scaling.W(dla))
        rhs = sigma * mu * e - cone.jprod(xi, xi) - corr
        dy, dz, dl = newton(cone.jsolve(xi, rhs))
        step = min(1.0, 0.99 * cone.max_step(z, dz), 0.99 * cone.max_step(lam, dl))
        if not np.isfinite(step) or step < 1e-12:
            if best_merit <= STALL_TOL:
                # same precision floor as a stall: the primal point still violates
                return FeasibilityResult(False, None, viol, best_lb, False, it, _cone_duals(prog, lam))
            raise NumericalFailure(f"interior-point step collapsed at iteration {it}")
        y += step * dy
        z += step * dz
        lam += step * dl
    raise NumericalFailure(f"no certificate after {max_iter} interior-point iterations")


def _cone_duals(prog, lam):
    k = prog.system.n_cones
    if k == 0:
        return np.zeros(0)
    w = np.abs(lam[prog.cone_rows])
    total = w.sum()
    return w / total if total > 0 else w


@dataclass
class GammaSolveResult:
    """Bracket and optimal point from a bisection over the level parameter."""

    gamma_star: float
    x_star: np.ndarray
    feasible_at: float
    infeasible_at: float
    bisection_iters: int
    support_duals: np.ndarray | None = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)
    uncertified: list = field(default_factory=list)


def bisection_iterations(gamma_lo, gamma_hi, tol):
    width = gamma_hi - gamma_lo
    return 0 if width <= tol else int(math.ceil(math.log2(width / tol)))


def _test_level(system, uncertified, gamma, **feas_kw):
    """Feasibility test that downgrades a solver breakdown to an uncertified "infeasible".

    The feasible side of a bracket is always backed by an explicit point, so
    this only ever makes the reported level conservative.
    """
    try:
        res = check_feasibility(system, **feas_kw)
    except NumericalFailure as exc:
        log.warning("level %.9g: %s; treated as infeasible (uncertified)", gamma, exc)
        uncertified.append(gamma)
        return FeasibilityResult(False, None, np.nan, -np.inf, False, -1)
    if not res.feasible and not res.certified:
        uncertified.append(gamma)
    return res


def bisect_gamma(builder, gamma_lo, gamma_hi, tol=1e-6, *, hi_result=None, uncertified=None, **feas_kw):
    """Minimize the level parameter by interval halving over feasibility tests.

    ``builder(gamma)`` must return a :class:`ConicSystem` (or a
    ``(cones, linears)`` pair) whose feasibility is monotone in ``gamma``.
    ``hi_result`` may carry an already computed feasible result at
    ``gamma_hi`` to skip the first test.
    """
    uncertified = [] if uncertified is None else uncertified

    def test(g):
        sys_ = builder(g)
        if not isinstance(sys_, ConicSystem):
            sys_ = ConicSystem.from_constraints(*sys_)
        return _test_level(sys_, uncertified, g, **feas_kw)

    res_hi = hi_result if hi_result is not None else test(gamma_hi)
    if not res_hi.feasible:
        raise BadBracket(f"upper bracket gamma={gamma_hi:.6g} is infeasible")
    lo, hi = float(gamma_lo), float(gamma_hi)
    x_star = res_hi.x
    duals = None
    history = [(hi, True)]
    n_iter = bisection_iterations(lo, hi, tol)
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        res = test(mid)
        history.append((mid, res.feasible))
        log.debug("bisect gamma=%.9g feasible=%s iters=%d", mid, res.feasible, res.iterations)
        if res.feasible:
            hi, x_star = mid, res.x
        else:
            lo = mid
            if res.cone_duals is not None:
                duals = res.cone_duals
    return GammaSolveResult(0.5 * (lo + hi), x_star, hi, lo, n_iter, duals, history, uncertified)


class FractionalProgram:
    """Quasi-convex program ``min gamma`` over three constraint families.

    * scaled cones  ``|A_k x + a0_k| <= gamma (b_k . x + beta_k)``
    * fixed cones   ``|C_k x + c0_k| <= d_k . x + delta_k``
    * linears       ``g_l . x >= h_l``

    Calling the instance with a level returns the :class:`ConicSystem` for
    that level, so it can be passed to :func:`bisect_gamma` directly.
    """

    def __init__(self, n, scaled, fixed=None, linear=None):
        self.n = n
        self.scaled = scaled  # (head, head0, body, body0, dims)
        self.fixed = fixed
        self.linear = linear  # (g, h)

    def __call__(self, gamma):
        head, head0, body, body0, dims = self.scaled
        heads, head0s, bodies, body0s, dimss = [gamma * head], [gamma * np.asarray(head0)], [body], [body0], [dims]
        if self.fixed is not None:
            fh, fh0, fb, fb0, fd = self.fixed
            heads.append(fh)
            head0s.append(fh0)
            bodies.append(fb)
            body0s.append(fb0)
            dimss.append(fd)
        g, hv = self.linear if self.linear is not None else (None, None)
        return ConicSystem(
            self.n,
            sp.vstack(heads),
            np.concatenate(head0s),
            sp.vstack(bodies),
            np.concatenate(body0s),
            np.concatenate(dimss),
            g,
            hv,
        )

    @property
    def n_scaled(self):
        return len(self.scaled[4])

    def ratios(self, x):
        """Per-cone residual ratio ``|A x + a0| / (b . x + beta)`` for the scaled cones."""
        head, head0, body, body0, dims = self.scaled
        r = body @ x + body0
        offs = np.concatenate([[0], np.cumsum(dims)])
        norms = np.sqrt(np.add.reduceat(r * r, offs[:-1]))
        den = head @ x + head0
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, norms / den, np.inf)

    def denominators(self, x):
        head, head0 = self.scaled[0], self.scaled[1]
        return head @ x + head0

    def linear_slacks(self, x):
        if self.linear is None:
            return np.zeros(0)
        g, hv = self.linear
        return g @ x - hv

    def fixed_slacks(self, x):
        if self.fixed is None:
            return np.zeros(0)
        fh, fh0, fb, fb0, fd = self.fixed
        return ConicSystem(self.n, fh, fh0, fb, fb0, fd).cone_slacks(x)


def initial_upper_bound(builder, probe_point, safety=1.1):
    """Level at which ``probe_point`` is feasible, inflated by ``safety``.

    ``builder`` must be a :class:`FractionalProgram`.
    """
    x = np.asarray(probe_point, dtype=float)
    if np.any(builder.linear_slacks(x) <= 0) or np.any(builder.denominators(x) <= 0):
        raise ProbeViolatesLinear("probe point does not strictly satisfy the linear constraints")
    if np.any(builder.fixed_slacks(x) < 0):
        raise ProbeViolatesLinear("probe point violates a level-independent cone")
    r = builder.ratios(x)
    return float(safety * r.max()) if len(r) else 0.0


def minimize_level(program, tol=1e-6, probe=None, *, gamma_start=1e-3, gamma_max=10.0, growth=4.0, **feas_kw):
    """Bracket and bisect the optimal level of a :class:`FractionalProgram`.

    The upper bracket comes from ``probe`` when it strictly satisfies the
    level-independent constraints; otherwise the level is grown
    geometrically from ``gamma_start`` until a feasible level is found.

    Raises
    ------
    Infeasible
        when no level up to ``gamma_max`` is feasible.
    """
    from .exceptions import Infeasible

    lo = 0.0
    hi_res = None
    hi = None
    uncertified = []
    if probe is not None:
        try:
            hi = max(initial_upper_bound(program, probe), tol)
        except ProbeViolatesLinear:
            hi = None
        if hi is not None and hi <= gamma_max:
            hi_res = _test_level(program(hi), [], hi, **feas_kw)
            if not hi_res.feasible:
                hi, hi_res = None, None
    if hi_res is None:
        g = gamma_start
        while True:
            res = _test_level(program(g), uncertified, g, **feas_kw)
            if res.feasible:
                hi, hi_res = g, res
                break
            lo = g
            if g >= gamma_max:
                raise Infeasible(
                    f"no feasible level up to {gamma_max:g}",
                    {"cone_duals": res.cone_duals},
                )
            g = min(g * growth, gamma_max)
    return bisect_gamma(program, lo, hi, tol, hi_result=hi_res, uncertified=uncertified, **feas_kw)
