"""Batched homogeneous self-dual interior-point method for SOCPs.

Solves a stack of programs that share one cone layout::

    minimize    c'x
    subject to  A x = b,  G x + s = h,  s in K

where ``K`` is a product of nonnegative orthants and second-order cones
``{(u0, u1): ||u1|| <= u0}``.  The iteration follows the standard
Nesterov-Todd scaled predictor-corrector scheme on the self-dual embedding.
Every program in the stack is iterated independently (converged programs are
frozen), so a batch of one gives the same answer as a batch of many.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
FAILED = "numerical_failure"
INACCURATE = "inaccurate"

# a stalled run is reported as INACCURATE when its best iterate meets this
_TOL_INACC = 1e-5
_STALL = 12

_STEP = 0.99
_REG = 1e-9
_REG_REL = 1e-13
_REFINE_TOL = 1e-10
_REFINE = 3


@dataclass(frozen=True)
class Layout:
    """Row bookkeeping for a cone product."""

    lin: np.ndarray
    socs: tuple[slice, ...]
    degree: int
    m: int
    lin_parts: tuple[tuple[slice, slice], ...] = ()

    def sign(self, n: int) -> np.ndarray:
        """Diagonal of J = diag(1, -1, ..., -1)."""
        out = -np.ones(n)
        out[0] = 1.0
        return out

    @classmethod
    def from_cones(cls, cones) -> "Layout":
        lin: list[int] = []
        socs: list[slice] = []
        pos = 0
        for kind, dim in cones:
            dim = int(dim)
            if kind == "l" or (kind == "q" and dim == 1):
                lin.extend(range(pos, pos + dim))
            elif kind == "q":
                socs.append(slice(pos, pos + dim))
            else:
                raise ValueError(f"unknown cone kind {kind!r}")
            pos += dim
        # contiguous runs of orthant rows, with their offsets into the lin-only arrays
        parts, k, lin_arr = [], 0, np.asarray(lin, dtype=int)
        while k < lin_arr.size:
            j = k
            while j + 1 < lin_arr.size and lin_arr[j + 1] == lin_arr[j] + 1:
                j += 1
            parts.append((slice(int(lin_arr[k]), int(lin_arr[j]) + 1), slice(k, j + 1)))
            k = j + 1
        return cls(lin_arr, tuple(socs), len(lin) + len(socs), pos, tuple(parts))

    def identity(self, batch: int) -> np.ndarray:
        e = np.zeros((batch, self.m))
        e[:, self.lin] = 1.0
        for sl in self.socs:
            e[:, sl.start] = 1.0
        return e

    def min_eig(self, u: np.ndarray) -> np.ndarray:
        """Smallest Jordan eigenvalue per program (negative = outside K)."""
        out = np.full(u.shape[0], np.inf)
        if self.lin.size:
            out = np.minimum(out, u[:, self.lin].min(axis=1))
        for sl in self.socs:
            blk = u[:, sl]
            out = np.minimum(out, blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1))
        return out

    def inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("bi,bi->b", u, v)

    def jprod(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        li = self.lin
        out[:, li] = u[:, li] * v[:, li]
        for sl in self.socs:
            a, b = u[:, sl], v[:, sl]
            out[:, sl.start] = np.einsum("bi,bi->b", a, b)
            out[:, sl.start + 1 : sl.stop] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
        return out

    def jdiv(self, lam: np.ndarray, r: np.ndarray, dets=None) -> np.ndarray:
        """Solve ``lam o x = r`` for x (``dets`` = lam'J lam per cone)."""
        out = np.empty_like(r)
        li = self.lin
        out[:, li] = r[:, li] / lam[:, li]
        for q, sl in enumerate(self.socs):
            l0, l1 = lam[:, sl.start], lam[:, sl.start + 1 : sl.stop]
            r0, r1 = r[:, sl.start], r[:, sl.start + 1 : sl.stop]
            det = _jnorm(lam[:, sl]) ** 2 if dets is None else dets[q]
            x0 = (l0 * r0 - np.einsum("bi,bi->b", l1, r1)) / det
            out[:, sl.start] = x0
            out[:, sl.start + 1 : sl.stop] = (r1 - x0[:, None] * l1) / l0[:, None]
        return out

    def max_step(self, u: np.ndarray, du: np.ndarray) -> np.ndarray:
        """Largest alpha with ``u + alpha du`` in K (u assumed interior)."""
        out = np.full(u.shape[0], np.inf)
        li = self.lin
        if li.size:
            d = du[:, li]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(d < 0, -u[:, li] / d, np.inf)
            out = np.minimum(out, ratio.min(axis=1))
        for sl in self.socs:
            x, d = u[:, sl], du[:, sl]
            qa = d[:, 0] ** 2 - np.einsum("bi,bi->b", d[:, 1:], d[:, 1:])
            qb = 2.0 * (x[:, 0] * d[:, 0] - np.einsum("bi,bi->b", x[:, 1:], d[:, 1:]))
            qc = x[:, 0] ** 2 - np.einsum("bi,bi->b", x[:, 1:], x[:, 1:])
            out = np.minimum(out, _first_root(qa, qb, qc))
        return out


def _jnorm(u: np.ndarray) -> np.ndarray:
    """sqrt(u0^2 - ||u1||^2) computed without cancellation."""
    r = np.linalg.norm(u[:, 1:], axis=1)
    return np.sqrt(np.maximum((u[:, 0] - r) * (u[:, 0] + r), 1e-300))


def _first_root(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Smallest positive root of ``a t^2 + b t + c`` (c > 0), inf if none."""
    c = np.maximum(c, 0.0)
    res = np.full(a.shape, np.inf)
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -0.5 * (b + np.where(b >= 0, sq, -sq))
        r1 = np.where(a != 0, q / a, np.inf)
        r2 = np.where(q != 0, c / q, np.inf)
    r1 = np.where(np.isfinite(r1) & (r1 > 0), r1, np.inf)
    r2 = np.where(np.isfinite(r2) & (r2 > 0), r2, np.inf)
    roots = np.minimum(r1, r2)
    lin = (a == 0) & (b < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = np.where(lin, -c / b, roots)
    return np.where((disc >= 0) | (a < 0) | lin, roots, res)


class _Scaling:
    """Nesterov-Todd scaling W (symmetric) with ``W z = W^{-1} s = lam``."""

    def __init__(self, lay: Layout, s: np.ndarray, z: np.ndarray):
        self.lay = lay
        li = lay.lin
        self.d = np.sqrt(s[:, li] / z[:, li])
        self.blocks = []
        lam = np.empty_like(s)
        lam[:, li] = np.sqrt(s[:, li] * z[:, li])
        dets = []
        for sl in lay.socs:
            sb, zb = s[:, sl], z[:, sl]
            sn = _jnorm(sb)
            zn = _jnorm(zb)
            sbar = sb / sn[:, None]
            zbar = zb / zn[:, None]
            gam = np.sqrt(np.maximum((1.0 + np.einsum("bi,bi->b", sbar, zbar)) / 2.0, 1e-300))
            jz = zbar.copy()
            jz[:, 1:] *= -1.0
            wbar = (sbar + jz) / (2.0 * gam[:, None])
            v = wbar.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (np.maximum(wbar[:, 0], 1.0) + 1.0))[:, None]
            beta = np.sqrt(sn / zn)
            self.blocks.append((sl, beta, v))
            vz = np.einsum("bi,bi->b", v, zb)
            wz = 2.0 * vz[:, None] * v
            wz[:, 0] -= zb[:, 0]
            wz[:, 1:] += zb[:, 1:]
            lam[:, sl] = beta[:, None] * wz
            dets.append(sn * zn)
        self.lam = lam
        self.dets = dets

    def apply(self, u: np.ndarray, inverse: bool = False) -> np.ndarray:
        """Apply W (or W^{-1}) to vectors (B, m) or matrices (B, m, k)."""
        if u.ndim == 3:
            return self._apply_mat(u, inverse)
        out = np.empty_like(u)
        d = self.d if not inverse else 1.0 / self.d
        for sl, ds in self.lay.lin_parts:
            out[:, sl] = u[:, sl] * d[:, ds]
        for sl, beta, v in self.blocks:
            blk = u[:, sl]
            if inverse:
                # (1/beta) (2 J v v' J - J) u
                jv = v * self.lay.sign(v.shape[1])
                res = (2.0 * np.einsum("bi,bi->b", jv, blk))[:, None] * jv
                res[:, 0] -= blk[:, 0]
                res[:, 1:] += blk[:, 1:]
                out[:, sl] = res / beta[:, None]
            else:
                # beta (2 v v' - J) u
                res = (2.0 * np.einsum("bi,bi->b", v, blk))[:, None] * v
                res[:, 0] -= blk[:, 0]
                res[:, 1:] += blk[:, 1:]
                out[:, sl] = res * beta[:, None]
        return out

    def apply2(self, u: np.ndarray, inverse: bool = False) -> np.ndarray:
        """Apply W^2 (or W^{-2}) to vectors in one pass."""
        out = np.empty_like(u)
        d2 = self.d**2 if not inverse else 1.0 / self.d**2
        for sl, ds in self.lay.lin_parts:
            out[:, sl] = u[:, sl] * d2[:, ds]
        for sl, beta, v in self.blocks:
            blk = u[:, sl]
            sgn = self.lay.sign(v.shape[1])
            # (2 a a' - J)^2 u = (4 (a'a)(a'u) - 2 (Ja)'u) a - 2 (a'u) J a + u
            a = v * sgn if inverse else v
            ja = v if inverse else v * sgn
            au = np.einsum("bi,bi->b", a, blk)
            aa = np.einsum("bi,bi->b", a, a)
            jau = np.einsum("bi,bi->b", ja, blk)
            res = (4.0 * aa * au - 2.0 * jau)[:, None] * a - (2.0 * au)[:, None] * ja + blk
            f = 1.0 / beta**2 if inverse else beta**2
            out[:, sl] = res * f[:, None]
        return out

    def _apply_mat(self, u: np.ndarray, inverse: bool) -> np.ndarray:
        out = np.empty_like(u)
        d = self.d if not inverse else 1.0 / self.d
        for sl, ds in self.lay.lin_parts:
            out[:, sl] = u[:, sl] * d[:, ds, None]
        for sl, beta, v in self.blocks:
            blk = u[:, sl]
            w = v * self.lay.sign(v.shape[1]) if inverse else v
            res = 2.0 * w[:, :, None] * np.matmul(w[:, None, :], blk)
            res[:, 0] -= blk[:, 0]
            res[:, 1:] += blk[:, 1:]
            out[:, sl] = res / beta[:, None, None] if inverse else res * beta[:, None, None]
        return out


@dataclass
class BatchResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: list
    pres: np.ndarray
    dres: np.ndarray
    gap: np.ndarray
    iterations: np.ndarray


def _norm(u: np.ndarray) -> np.ndarray:
    return np.linalg.norm(u, axis=1)


def _mv(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.matmul(M, u[:, :, None])[:, :, 0]


def _mtv(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.matmul(u[:, None, :], M)[:, 0, :]


def _reg_sign(M: np.ndarray) -> np.ndarray:
    """+1 on the primal block and -1 on the equality block of the KKT diagonal."""
    diag = np.where(np.diag(M) < 0, -1.0, 1.0)
    return np.diag(diag)


def _batch_inv(M: np.ndarray) -> np.ndarray:
    """Batched inverse; singular members fall back to the pseudo-inverse.

    A single singular program must not abort the whole stack.
    """
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        out = np.empty_like(M)
        for k in range(M.shape[0]):
            try:
                out[k] = np.linalg.inv(M[k])
            except np.linalg.LinAlgError:
                # regularize relative to the scale of H; refinement corrects the bias
                eps = 1e-12 * max(1.0, float(np.abs(np.diag(M[k])).max()))
                try:
                    out[k] = np.linalg.inv(M[k] + eps * _reg_sign(M[k]))
                except np.linalg.LinAlgError:
                    out[k] = np.linalg.pinv(M[k])
        return out


class _Kkt:
    """Reduced solver for ``[[0, A', G'], [A, 0, 0], [G, 0, -W'W]]``."""

    def __init__(self, A, G, scal: _Scaling):
        self.A, self.G, self.scal = A, G, scal
        n, p = G.shape[2], A.shape[1]
        Gt = scal.apply(G, inverse=True)
        H = np.matmul(np.swapaxes(Gt, 1, 2), Gt)
        M = np.zeros((G.shape[0], n + p, n + p))
        M[:, :n, :n] = H
        M[:, :n, n:] = np.swapaxes(A, 1, 2)
        M[:, n:, :n] = A
        idx = np.arange(n)
        hmax = np.abs(H[:, idx, idx]).max(axis=1, initial=0.0)
        reg = np.maximum(_REG, _REG_REL * hmax)[:, None]
        M[:, idx, idx] += reg
        idp = np.arange(n, n + p)
        M[:, idp, idp] -= _REG
        self.Minv = _batch_inv(M)
        self.n, self.p = n, p

    def _winv2(self, u):
        return self.scal.apply2(u, inverse=True)

    def _base(self, r1, r2, r3):
        rhs = np.concatenate([r1 + _mtv(self.G, self._winv2(r3)), r2], axis=1)
        sol = _mv(self.Minv, rhs)
        dx, dy = sol[:, : self.n], sol[:, self.n :]
        dz = self._winv2(_mv(self.G, dx) - r3)
        return dx, dy, dz

    def _error(self, r1, r2, r3, dx, dy, dz):
        e1 = r1 - _mtv(self.A, dy) - _mtv(self.G, dz)
        e2 = r2 - _mv(self.A, dx)
        e3 = r3 - _mv(self.G, dx) + self.scal.apply2(dz)
        size = np.maximum.reduce([np.abs(e1).max(axis=1, initial=0.0),
                                  np.abs(e2).max(axis=1, initial=0.0),
                                  np.abs(e3).max(axis=1, initial=0.0)])
        return e1, e2, e3, size

    def solve(self, r1, r2, r3):
        # refinement against the unregularized system; a correction is kept only
        # where it shrinks the error (it cannot along null directions of H)
        dx, dy, dz = self._base(r1, r2, r3)
        e1, e2, e3, err = self._error(r1, r2, r3, dx, dy, dz)
        rhs = np.maximum.reduce([np.abs(r).max(axis=1, initial=0.0) for r in (r1, r2, r3)])
        enough = _REFINE_TOL * np.maximum(rhs, 1.0)
        for _ in range(_REFINE):
            if np.all(err <= enough):
                break
            cx, cy, cz = self._base(e1, e2, e3)
            nx, ny, nz = dx + cx, dy + cy, dz + cz
            f1, f2, f3, ferr = self._error(r1, r2, r3, nx, ny, nz)
            better = (ferr < 0.5 * err) & (err > enough)
            if not better.any():
                break
            b = better[:, None]
            dx, dy, dz = np.where(b, nx, dx), np.where(b, ny, dy), np.where(b, nz, dz)
            e1, e2, e3 = np.where(b, f1, e1), np.where(b, f2, e2), np.where(b, f3, e3)
            err = np.where(better, ferr, err)
        return dx, dy, dz


def solve_batch(c, A, b, G, h, cones, tol_feas=1e-8, tol_gap=1e-8, max_iter=200) -> BatchResult:
    """Solve a stack of SOCPs.  Leading axis of every array is the batch."""
    # diverging iterates are detected and rolled back, so silence float warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _solve_batch(c, A, b, G, h, cones, tol_feas, tol_gap, max_iter)


def _solve_batch(c, A, b, G, h, cones, tol_feas, tol_gap, max_iter) -> BatchResult:
    c, A, b, G, h = (np.asarray(v, dtype=float) for v in (c, A, b, G, h))
    lay = Layout.from_cones(cones)
    nb, m, n = G.shape
    p = A.shape[1]
    if m != lay.m:
        raise ValueError("cone dimensions do not match rows of G")

    x = np.zeros((nb, n))
    y = np.zeros((nb, p))
    z = np.zeros((nb, m))
    s = np.zeros((nb, m))
    tau = np.ones(nb)
    kap = np.ones(nb)
    status = [MAX_ITER] * nb
    pres = np.full(nb, np.inf)
    dres = np.full(nb, np.inf)
    gapv = np.full(nb, np.inf)
    iters = np.zeros(nb, dtype=int)

    # initial point: least-squares primal and dual, shifted into the cone
    ones = _Scaling(lay, lay.identity(nb), lay.identity(nb))
    kkt0 = _Kkt(A, G, ones)
    x0, _, z0 = kkt0.solve(np.zeros((nb, n)), b, h)
    s0 = -z0
    _, y1, z1 = kkt0.solve(-c, np.zeros((nb, p)), np.zeros((nb, m)))
    e = lay.identity(nb)
    ap = -lay.min_eig(s0)
    s0 = s0 + np.where(ap >= 0, 1.0 + ap, 0.0)[:, None] * e
    ad = -lay.min_eig(z1)
    z1 = z1 + np.where(ad >= 0, 1.0 + ad, 0.0)[:, None] * e
    x[:], s[:], y[:], z[:] = x0, s0, y1, z1

    best = {"merit": np.full(nb, np.inf), "stall": np.zeros(nb, dtype=int)}
    saved = [x.copy(), y.copy(), z.copy(), s.copy(), tau.copy(), kap.copy()]
    saved_res = [pres.copy(), dres.copy(), gapv.copy(), iters.copy()]

    def restore(g):
        x[g], y[g], z[g], s[g] = saved[0][g], saved[1][g], saved[2][g], saved[3][g]
        tau[g], kap[g] = saved[4][g], saved[5][g]
        pres[g], dres[g], gapv[g], iters[g] = saved_res[0][g], saved_res[1][g], saved_res[2][g], saved_res[3][g]
        ok = pres[g] <= _TOL_INACC and dres[g] <= _TOL_INACC and gapv[g] <= _TOL_INACC
        return INACCURATE if ok else (MAX_ITER if np.isfinite(best["merit"][g]) else FAILED)

    nrm_b = np.maximum(1.0, _norm(b))
    nrm_h = np.maximum(1.0, _norm(h))
    nrm_c = np.maximum(1.0, _norm(c))
    active = np.ones(nb, dtype=bool)

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cA, cG, cb, ch, cc = A[idx], G[idx], b[idx], h[idx], c[idx]
        xi, yi, zi, si, ti, ki = x[idx], y[idx], z[idx], s[idx], tau[idx], kap[idx]

        rx = _mtv(cA, yi) + _mtv(cG, zi) + cc * ti[:, None]
        ry = _mv(cA, xi) - cb * ti[:, None]
        rz = si + _mv(cG, xi) - ch * ti[:, None]
        cx = np.einsum("bi,bi->b", cc, xi)
        by = np.einsum("bi,bi->b", cb, yi)
        hz = np.einsum("bi,bi->b", ch, zi)
        rt = ki + cx + by + hz
        sz = lay.inner(si, zi)

        pr = np.maximum(_norm(ry) / nrm_b[idx], _norm(rz) / nrm_h[idx]) / ti
        dr = _norm(rx) / nrm_c[idx] / ti
        pcost, dcost = cx / ti, -(by + hz) / ti
        absgap = sz / ti**2
        with np.errstate(divide="ignore", invalid="ignore"):
            relgap = np.where(pcost < 0, absgap / -pcost, np.where(dcost > 0, absgap / dcost, np.inf))
        gp = np.minimum(absgap, relgap)
        pres[idx], dres[idx], gapv[idx] = pr, dr, gp
        iters[idx] = it

        done = np.zeros(idx.size, dtype=bool)
        opt = (pr <= tol_feas) & (dr <= tol_feas) & (gp <= tol_gap)
        hres_x = _norm(_mtv(cA, yi) + _mtv(cG, zi)) / nrm_c[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            infeas = (~opt) & (by + hz < 0) & (hres_x / -(by + hz) <= tol_feas)
            hres_p = np.maximum(_norm(_mv(cA, xi)) / nrm_b[idx], _norm(_mv(cG, xi) + si) / nrm_h[idx])
            unbnd = (~opt) & (~infeas) & (cx < 0) & (hres_p / -cx <= tol_feas)
        bad = ~np.all(np.isfinite(np.concatenate([xi, zi, si], axis=1)), axis=1) | ~np.isfinite(ti)
        bad |= ~(np.isfinite(pr) & np.isfinite(dr) & np.isfinite(gp))
        merit = np.maximum(np.maximum(pr, dr) / tol_feas, gp / tol_gap)
        for j, g in enumerate(idx):
            if bad[j]:
                continue
            if merit[j] < best["merit"][g]:
                best["merit"][g] = merit[j]
                best["stall"][g] = 0
                for buf, cur in zip(saved, (xi, yi, zi, si, ti, ki)):
                    buf[g] = cur[j]
                for buf, cur in zip(saved_res, (pres, dres, gapv, iters)):
                    buf[g] = cur[g]
            else:
                best["stall"][g] += 1
        # tau/kappa collapsing means a certificate is forming: the merit
        # necessarily grows then, so the stall guards do not apply
        certifying = ti < 1e-2 * ki
        for j, g in enumerate(idx):
            diverged = best["stall"][g] >= _STALL or merit[j] > 1e6 * best["merit"][g]
            if bad[j] or (diverged and not certifying[j]):
                status[g], done[j] = restore(g), True
            elif opt[j]:
                status[g], done[j] = OPTIMAL, True
            elif infeas[j]:
                status[g], done[j] = INFEASIBLE, True
            elif unbnd[j]:
                status[g], done[j] = UNBOUNDED, True
        if it == max_iter:
            for j, g in enumerate(idx):
                if not done[j]:
                    status[g], done[j] = restore(g), True
        active[idx[done]] = False
        keep = ~done
        if not keep.any():
            continue
        idx = idx[keep]
        cA, cG, cb, ch, cc = cA[keep], cG[keep], cb[keep], ch[keep], cc[keep]
        xi, yi, zi, si, ti, ki = xi[keep], yi[keep], zi[keep], si[keep], ti[keep], ki[keep]
        rx, ry, rz, rt, sz = rx[keep], ry[keep], rz[keep], rt[keep], sz[keep]
        mu = (sz + ti * ki) / (lay.degree + 1)

        try:
            scal = _Scaling(lay, si, zi)
            kkt = _Kkt(cA, cG, scal)
        except np.linalg.LinAlgError:
            for g in idx:
                status[g] = restore(g)
            active[idx] = False
            continue
        lam = scal.lam
        u2x, u2y, u2z = kkt.solve(-cc, cb, ch)
        q_u2 = (np.einsum("bi,bi->b", cc, u2x) + np.einsum("bi,bi->b", cb, u2y)
                + np.einsum("bi,bi->b", ch, u2z))
        nbk = idx.size
        eb = lay.identity(nbk)

        def direction(eta, ds_t, dk_t):
            eta = np.broadcast_to(np.asarray(eta, dtype=float), (nbk,))
            ec = eta[:, None]
            w_l = scal.apply(lay.jdiv(lam, ds_t, scal.dets))
            u1x, u1y, u1z = kkt.solve(-ec * rx, -ec * ry, -ec * rz - w_l)
            q_u1 = (np.einsum("bi,bi->b", cc, u1x) + np.einsum("bi,bi->b", cb, u1y)
                    + np.einsum("bi,bi->b", ch, u1z))
            dt = (eta * rt + dk_t / ti + q_u1) / (ki / ti - q_u2)
            dx = u1x + dt[:, None] * u2x
            dy = u1y + dt[:, None] * u2y
            dz = u1z + dt[:, None] * u2z
            ds = scal.apply(lay.jdiv(lam, ds_t, scal.dets) - scal.apply(dz))
            dk = (dk_t - ki * dt) / ti
            return dx, dy, dz, ds, dt, dk

        def step(dz, ds, dt, dk):
            a = np.minimum(lay.max_step(si, ds), lay.max_step(zi, dz))
            with np.errstate(divide="ignore", invalid="ignore"):
                a = np.minimum(a, np.where(dt < 0, -ti / dt, np.inf))
                a = np.minimum(a, np.where(dk < 0, -ki / dk, np.inf))
            return a

        # predictor
        ds_aff = -lay.jprod(lam, lam)
        dk_aff = -ti * ki
        _, _, dza, dsa, dta, dka = direction(1.0, ds_aff, dk_aff)
        a_aff = np.minimum(1.0, step(dza, dsa, dta, dka))
        sigma = (1.0 - a_aff) ** 3
        # corrector
        corr = lay.jprod(scal.apply(dsa, inverse=True), scal.apply(dza))
        ds_c = ds_aff - corr + (sigma * mu)[:, None] * eb
        dk_c = dk_aff - dka * dta + sigma * mu
        dx, dy, dz, ds, dt, dk = direction(1.0 - sigma, ds_c, dk_c)
        a = np.minimum(1.0, _STEP * step(dz, ds, dt, dk))

        x[idx] = xi + a[:, None] * dx
        y[idx] = yi + a[:, None] * dy
        z[idx] = zi + a[:, None] * dz
        s[idx] = si + a[:, None] * ds
        tau[idx] = ti + a * dt
        kap[idx] = ki + a * dk
        stuck = (a < 1e-12) | ~np.isfinite(a)
        for j in np.flatnonzero(stuck):
            status[idx[j]] = restore(idx[j])
            active[idx[j]] = False

    xo, yo, zo, so = x.copy(), y.copy(), z.copy(), s.copy()
    for g in range(nb):
        if status[g] in (OPTIMAL, INACCURATE, MAX_ITER, FAILED):
            t = tau[g] if tau[g] > 0 else 1.0
            xo[g], yo[g], zo[g], so[g] = x[g] / t, y[g] / t, z[g] / t, s[g] / t
        elif status[g] == INFEASIBLE:
            k = -(b[g] @ y[g] + h[g] @ z[g])
            yo[g], zo[g] = y[g] / k, z[g] / k
            xo[g][:] = np.nan
        elif status[g] == UNBOUNDED:
            k = -(c[g] @ x[g])
            xo[g], so[g] = x[g] / k, s[g] / k
            yo[g][:] = np.nan
            zo[g][:] = np.nan
    return BatchResult(xo, yo, zo, so, status, pres, dres, gapv, iters)
