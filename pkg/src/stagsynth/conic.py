"""Second-order cone programs for the weight fit and the in-sample bounds.

Programs use the form ``min c'x  s.t.  A x = b,  h - G x in K`` where ``K``
is an ordered product of nonnegative orthants ``("l", m)`` and second-order
cones ``("q", n)`` with the cone head first.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _ipm
from .config import ConstraintSpec
from .constraints import RelaxedSet
from .errors import InvalidConfig, NumericalFailure
from .panel import DesignMatrices

LOGGER = logging.getLogger(__name__)

OPTIMAL = _ipm.OPTIMAL
INFEASIBLE = _ipm.INFEASIBLE
UNBOUNDED = _ipm.UNBOUNDED
MAX_ITER = _ipm.MAX_ITER
INACCURATE = _ipm.INACCURATE
FAILED = _ipm.FAILED
USABLE = (OPTIMAL, INACCURATE)

EIG_CLIP = 1e-12


@dataclass(frozen=True, eq=False)
class ConicProgram:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    cones: tuple[tuple[str, int], ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        n = self.c.size
        if self.A.shape != (self.b.size, n) or self.G.shape != (self.h.size, n):
            raise ValueError("inconsistent program dimensions")
        if sum(dim for _, dim in self.cones) != self.h.size:
            raise ValueError("cone dimensions do not add up to the rows of G")
        if len(self.labels) != n:
            raise ValueError("every variable needs a label")

    @property
    def n(self) -> int:
        return self.c.size

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def signature(self) -> tuple:
        return (self.n, self.b.size, self.cones)


@dataclass
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    pres: float
    dres: float
    gap: float
    iterations: int
    wall_time: float

    @property
    def usable(self) -> bool:
        return self.status in USABLE


def solve_many(programs: Sequence[ConicProgram], tol_feas: float = 1e-8, tol_gap: float = 1e-8,
               max_iter: int = 200) -> list[ConicSolution]:
    """Solve programs, batching those that share a layout.  Never raises on status."""
    out: list[ConicSolution | None] = [None] * len(programs)
    groups: dict[tuple, list[int]] = {}
    for i, prog in enumerate(programs):
        groups.setdefault(prog.signature(), []).append(i)
    for sig, members in groups.items():
        t0 = time.perf_counter()
        stack = lambda attr: np.stack([getattr(programs[i], attr) for i in members])
        res = _ipm.solve_batch(stack("c"), stack("A"), stack("b"), stack("G"), stack("h"),
                               list(sig[2]), tol_feas=tol_feas, tol_gap=tol_gap, max_iter=max_iter)
        wall = time.perf_counter() - t0
        for k, i in enumerate(members):
            out[i] = ConicSolution(res.x[k], res.y[k], res.z[k], res.s[k], res.status[k],
                                   float(res.pres[k]), float(res.dres[k]), float(res.gap[k]),
                                   int(res.iterations[k]), wall)
    return out  # type: ignore[return-value]


def solve(program: ConicProgram, tol_feas: float = 1e-8, tol_gap: float = 1e-8,
          max_iter: int = 200) -> ConicSolution:
    sol = solve_many([program], tol_feas, tol_gap, max_iter)[0]
    if sol.status == FAILED:
        raise NumericalFailure(
            f"interior-point method broke down (pres={sol.pres:.3g}, dres={sol.dres:.3g}, gap={sol.gap:.3g})",
            solution=sol)
    return sol


def cone_violation(u: np.ndarray, cones: Sequence[tuple[str, int]]) -> np.ndarray:
    """Per-block distance outside the cone (0 when inside)."""
    out, pos = [], 0
    for kind, dim in cones:
        blk = u[pos : pos + dim]
        if kind == "l":
            out.append(max(0.0, float(-blk.min())) if dim else 0.0)
        else:
            out.append(max(0.0, float(np.linalg.norm(blk[1:]) - blk[0])))
        pos += dim
    return np.asarray(out)


def in_cone(u: np.ndarray, cones: Sequence[tuple[str, int]], tol: float = 0.0) -> bool:
    return bool(np.all(cone_violation(u, cones) <= tol))


def psd_sqrt(P: np.ndarray) -> np.ndarray:
    """Symmetric square root; eigenvalues below ``1e-12 * max(1, lambda_max)`` are set to 0."""
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    vals, vecs = np.linalg.eigh(P)
    cut = EIG_CLIP * max(1.0, float(vals.max(initial=0.0)))
    vals = np.where(vals < cut, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def epigraph_vector(x: np.ndarray, y: float, P_sqrt: np.ndarray | None = None) -> np.ndarray:
    """Cone point ``(1 + y, 1 - y, 2 P^{1/2} x)`` certifying ``x'Px <= y``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    px = x if P_sqrt is None else P_sqrt @ x
    return np.concatenate([[1.0 + y, 1.0 - y], 2.0 * px])


def norm_cone_epigraph(x_rows: np.ndarray, y_row: np.ndarray, x_off: np.ndarray | None = None,
                       y_off: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Cone rows for ``||X v + x0||^2 <= y'v + y0``.

    Returns ``(G, h)`` of one second-order cone block of size ``2 + k`` so
    that ``h - G v = (1 + y, 1 - y, 2 (X v + x0))``.
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    y_row = np.asarray(y_row, dtype=float)
    k, n = x_rows.shape
    x_off = np.zeros(k) if x_off is None else np.asarray(x_off, dtype=float)
    G = np.vstack([-y_row, y_row, -2.0 * x_rows]).reshape(2 + k, n)
    h = np.concatenate([[1.0 + y_off, 1.0 - y_off], 2.0 * x_off])
    return G, h


class _Builder:
    """Accumulates variables, equalities and cone blocks."""

    def __init__(self):
        self.labels: list[str] = []
        self.eq: list[tuple[dict[int, float], float]] = []
        self.blocks: list[tuple[str, list[dict[int, float]], np.ndarray]] = []

    def var(self, label: str) -> int:
        self.labels.append(label)
        return len(self.labels) - 1

    def vars(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.var(lab) for lab in labels], dtype=int)

    def equality(self, coef: dict[int, float], rhs: float) -> None:
        self.eq.append((coef, rhs))

    def block(self, kind: str, G: np.ndarray, cols: np.ndarray, h: np.ndarray) -> int:
        """Rows ``h - G[:, j] v[cols[j]]`` in a cone block; returns the first row index."""
        first = sum(len(rows) for _, rows, _ in self.blocks)
        rows = [{int(cols[j]): float(G[r, j]) for j in range(G.shape[1]) if G[r, j] != 0.0}
                for r in range(G.shape[0])]
        self.blocks.append((kind, rows, np.asarray(h, dtype=float)))
        return first

    def build(self, c: dict[int, float]) -> ConicProgram:
        n = len(self.labels)
        cv = np.zeros(n)
        for j, v in c.items():
            cv[j] = v
        A = np.zeros((len(self.eq), n))
        b = np.zeros(len(self.eq))
        for r, (coef, rhs) in enumerate(self.eq):
            for j, v in coef.items():
                A[r, j] = v
            b[r] = rhs
        # merge consecutive orthant blocks into one
        cones: list[tuple[str, int]] = []
        g_rows: list[dict[int, float]] = []
        h_parts: list[np.ndarray] = []
        for kind, rows, h in self.blocks:
            if not rows:
                continue
            if kind == "l" and cones and cones[-1][0] == "l":
                cones[-1] = ("l", cones[-1][1] + len(rows))
            else:
                cones.append((kind, len(rows)))
            g_rows.extend(rows)
            h_parts.append(h)
        G = np.zeros((len(g_rows), n))
        for r, coef in enumerate(g_rows):
            for j, v in coef.items():
                G[r, j] = v
        h = np.concatenate(h_parts) if h_parts else np.zeros(0)
        return ConicProgram(cv, A, b, G, h, tuple(cones), tuple(self.labels))


@dataclass(frozen=True)
class FitProgram:
    """A canonicalized weight fit plus the map back to ``beta``."""

    program: ConicProgram
    beta_idx: np.ndarray
    scale: float
    form: str


def _beta_labels(design: DesignMatrices) -> list[str]:
    labels = [""] * design.d
    for u in design.treated:
        for c, j in zip(design.w_cols[u], design.donor_pools[u]):
            labels[c] = f"w[{u},{j}]"
        for c, lab in zip(design.r_cols[u], design.r_labels[u]):
            labels[c] = f"r[{u},{':'.join(map(str, lab))}]"
    return labels


def canonicalize_fit(design: DesignMatrices, spec: ConstraintSpec, form: str = "squared",
                     scale: float = 1.0) -> FitProgram:
    """Cone program for ``min (A - Z beta)' V (A - Z beta)`` over the family.

    ``form="squared"`` uses the quadratic epigraph cone of size ``2 + rows``
    and quadratic ridge cones of size ``2 + J`` with a fixed auxiliary
    ``s = Q2^2``.  ``form="norm"`` minimizes the weighted residual norm and
    bounds ``||w||`` directly, which has the same minimizer and resolves the
    weights to full precision when the fit is exact.  Data are divided by
    ``scale`` before building the rows.
    """
    if form not in ("squared", "norm"):
        raise InvalidConfig(f"unknown fit form {form!r}")
    bld = _Builder()
    beta = bld.vars(_beta_labels(design))
    t = bld.var("t")
    fam = spec.family

    # orthant rows first, matching the cone order R+ x K x K
    for u in design.treated:
        wc = beta[design.w_cols[u]]
        J = wc.size
        if fam in ("simplex", "l1l2"):
            bld.block("l", -np.eye(J), wc, np.zeros(J))
        elif fam == "lasso":
            z = bld.vars([f"z[{u},{j}]" for j in design.donor_pools[u]])
            eye = np.eye(J)
            cols = np.concatenate([z, wc])
            bld.block("l", np.hstack([-eye, eye]), cols, np.zeros(J))     # z - w >= 0
            bld.block("l", np.hstack([-eye, -eye]), cols, np.zeros(J))    # z + w >= 0
            bld.block("l", np.ones((1, J)), z, np.array([spec.Q1]))       # Q1 - 1'z >= 0
    for u in design.treated:
        if fam in ("simplex", "l1l2"):
            bld.equality({int(c): 1.0 for c in beta[design.w_cols[u]]}, float(spec.Q1))

    R = psd_sqrt(design.V)
    RZ = R @ design.Z / scale
    RA = R @ design.A / scale
    cols = np.concatenate([beta, [t]])
    if form == "squared":
        # ||R(A - Z beta)||^2 <= t
        G, h = norm_cone_epigraph(np.hstack([-RZ, np.zeros((RZ.shape[0], 1))]),
                                  np.r_[np.zeros(beta.size), 1.0], RA)
    else:
        G = np.vstack([np.r_[np.zeros(beta.size), -1.0], np.hstack([RZ, np.zeros((RZ.shape[0], 1))])])
        h = np.r_[0.0, RA]
    bld.block("q", G, cols, h)

    if fam in ("ridge", "l1l2"):
        q2 = float(spec.Q2)
        for u in design.treated:
            wc = beta[design.w_cols[u]]
            J = wc.size
            if form == "squared":
                s = bld.var(f"s[{u}]")
                bld.equality({s: 1.0}, q2**2)
                G, h = norm_cone_epigraph(np.hstack([np.eye(J), np.zeros((J, 1))]), np.r_[np.zeros(J), 1.0])
                bld.block("q", G, np.r_[wc, s], h)
            else:
                G = np.vstack([np.zeros((1, J)), -np.eye(J)])
                bld.block("q", G, wc, np.r_[q2, np.zeros(J)])
    prog = bld.build({t: 1.0})
    return FitProgram(prog, beta, float(scale), form)


@dataclass(frozen=True)
class WeightFit:
    beta: np.ndarray
    weights: dict[str, dict[str, float]]
    covariates: dict[str, dict[str, float]]
    objective: float
    residuals: np.ndarray
    solution: ConicSolution
    program: FitProgram

    @property
    def status(self) -> str:
        return self.solution.status


def fit_objective(design: DesignMatrices, beta: np.ndarray) -> float:
    res = design.A - design.Z @ beta
    return float(res @ design.V @ res)


def estimate_weights(design: DesignMatrices, spec: ConstraintSpec, tol: float = 1e-8,
                     max_iter: int = 200) -> WeightFit:
    """Constrained weighted least squares for ``(w, r)``."""
    scale = float(np.sqrt(np.mean(design.A**2))) if design.A.size else 1.0
    scale = scale if scale > 0 else 1.0
    fp = canonicalize_fit(design, spec, form="norm", scale=scale)
    sol = solve(fp.program, tol, tol, max_iter)
    if sol.status not in USABLE:
        raise NumericalFailure(f"weight fit ended with status {sol.status}", solution=sol)
    if sol.status == INACCURATE:
        LOGGER.warning("weight fit reached reduced accuracy (pres=%.2g, gap=%.2g)", sol.pres, sol.gap)
    beta = polish_weights(design, spec, sol.x[fp.beta_idx].copy())
    weights = {u: {j: float(beta[c]) for c, j in zip(design.w_cols[u], design.donor_pools[u])}
               for u in design.treated}
    covs = {u: {":".join(map(str, lab)): float(beta[c]) for c, lab in zip(design.r_cols[u], design.r_labels[u])}
            for u in design.treated}
    return WeightFit(beta, weights, covs, fit_objective(design, beta), design.A - design.Z @ beta, sol, fp)


POLISH_ZERO = 1e-7


def polish_weights(design: DesignMatrices, spec: ConstraintSpec, beta: np.ndarray) -> np.ndarray:
    """Refine an interior-point fit by an exact solve on its active set.

    Weights below ``POLISH_ZERO * Q1`` are fixed at zero and every binding
    linear constraint becomes an equality; the resulting least-squares
    problem is solved in the null space of the equalities.  The refined
    point is kept only if it is feasible and does not raise the objective.
    A binding ridge ball is nonlinear, so such fits are returned unchanged.
    """
    fam = spec.family
    d = design.d
    thr = POLISH_ZERO * max(float(spec.Q1), 1.0)
    free = np.ones(d, dtype=bool)
    eq_rows, eq_rhs = [], []
    signs = np.zeros(d)
    for u in design.treated:
        wc = np.asarray(design.w_cols[u])
        w = beta[wc]
        if fam in ("ridge", "l1l2") and float(spec.Q2) - np.linalg.norm(w) < thr:
            return beta
        if fam in ("simplex", "l1l2"):
            free[wc[w <= thr]] = False
            keep = wc[w > thr]
            if keep.size == 0:
                return beta
            row = np.zeros(d)
            row[keep] = 1.0
            eq_rows.append(row)
            eq_rhs.append(float(spec.Q1))
        elif fam == "lasso":
            free[wc[np.abs(w) <= thr]] = False
            keep = wc[np.abs(w) > thr]
            signs[keep] = np.sign(beta[keep])
            if keep.size and float(spec.Q1) - np.abs(w).sum() < thr:
                row = np.zeros(d)
                row[keep] = signs[keep]
                eq_rows.append(row)
                eq_rhs.append(float(spec.Q1))
    idx = np.flatnonzero(free)
    R = psd_sqrt(design.V)
    RZ = (R @ design.Z)[:, idx]
    RA = R @ design.A
    if eq_rows:
        E = np.asarray(eq_rows)[:, idx]
        e = np.asarray(eq_rhs)
        b0 = np.linalg.lstsq(E, e, rcond=None)[0]
        _, sv, vt = np.linalg.svd(E)
        rank = int(np.sum(sv > 1e-12 * sv.max()))
        N = vt[rank:].T
        y = np.linalg.lstsq(RZ @ N, RA - RZ @ b0, rcond=None)[0] if N.size else np.zeros(0)
        sub = b0 + N @ y
    else:
        sub = np.linalg.lstsq(RZ, RA, rcond=None)[0]
    cand = np.zeros(d)
    cand[idx] = sub
    for u in design.treated:
        w = cand[design.w_cols[u]]
        if fam in ("simplex", "l1l2") and w.min() < 0.0:
            return beta
        if fam == "lasso":
            wc = np.asarray(design.w_cols[u])
            if np.any(cand[wc] * signs[wc] < 0.0) or np.abs(w).sum() > float(spec.Q1) * (1 + 1e-12):
                return beta
        if fam in ("ridge", "l1l2") and np.linalg.norm(w) > float(spec.Q2):
            return beta
    if fit_objective(design, cand) > fit_objective(design, beta):
        return beta
    LOGGER.debug("polished weights moved by %.3g", float(np.abs(cand - beta).max()))
    return cand


@dataclass(frozen=True)
class BoundProgram:
    """Scaled bound program; the bound is ``sign * value_scale * c'x``."""

    program: ConicProgram
    delta_idx: np.ndarray
    value_scale: float
    sign: float
    kappa: float
    row: int = -1
    q: float = 1.0
    basis: np.ndarray | None = None

    def with_draw(self, g: np.ndarray) -> "BoundProgram":
        """Same program with the basic-inequality row rebuilt for draw ``g``."""
        G = self.program.G.copy()
        coef = -(2.0 / self.kappa) * g / self.q
        G[self.row, self.delta_idx] = coef if self.basis is None else coef @ self.basis
        prog = ConicProgram(self.program.c, self.program.A, self.program.b, G, self.program.h,
                            self.program.cones, self.program.labels)
        return replace(self, program=prog)

    def delta(self, x: np.ndarray) -> np.ndarray:
        y = x[self.delta_idx]
        return self.kappa * (y if self.basis is None else self.basis @ y)


def _delta_rows(relaxed: RelaxedSet, bld: _Builder, delta: np.ndarray, kappa: float) -> None:
    """Rows of the relaxed set for ``delta = kappa * delta_tilde``."""
    bh = relaxed.beta_hat
    for con in relaxed.smooth.equalities:
        bld.equality({int(delta[c]): 1.0 for c in con.cols}, 0.0)
    for j, con in enumerate(relaxed.smooth.inequalities):
        rhs = float(relaxed.rhs[j])
        cols = delta[con.cols]
        if con.kind == "nonneg":
            # beta_hat + kappa*d >= -rhs
            bld.block("l", np.array([[-kappa]]), cols, np.array([bh[con.cols[0]] + rhs]))
        elif con.kind == "l1":
            J = cols.size
            z = bld.vars([f"zl[{con.unit},{i}]" for i in range(J)])
            eye = np.eye(J)
            both = np.concatenate([z, cols])
            b = bh[con.cols]
            bld.block("l", np.hstack([-eye, kappa * eye]), both, -b)
            bld.block("l", np.hstack([-eye, -kappa * eye]), both, b)
            bld.block("l", np.ones((1, J)), z, np.array([con.bound + rhs]))
        elif con.kind == "l2":
            J = cols.size
            radius = math.sqrt(max(con.bound + rhs, 0.0))
            G = np.vstack([np.zeros((1, J)), -kappa * np.eye(J)])
            bld.block("q", G, cols, np.r_[radius, bh[con.cols]])
        else:
            raise InvalidConfig(f"unsupported constraint kind {con.kind!r}")


def bound_scale(Q: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    """``(q, kappa)``: curvature normalization and ellipsoid radius."""
    d = Q.shape[0]
    q = float(np.trace(Q)) / d if d else 1.0
    q = q if q > 0 else 1.0
    gt = g / q
    center = np.linalg.lstsq(Q / q, gt, rcond=None)[0]
    kappa = float(np.linalg.norm(center))
    if not kappa > 0:
        kappa = float(np.linalg.norm(gt))
    return q, kappa


NULL_TOL = 1e-10


def set_extent(Q: np.ndarray, relaxed: RelaxedSet | None, delta_cap: float | None = None) -> float | None:
    """Size of the constraint set when ``Q`` is singular, else ``None``.

    Along the null space of ``Q`` the basic inequality is flat, so the
    feasible region reaches the constraint boundary there however small the
    draw is.  Scaling by the draw alone would then leave directions many
    orders of magnitude longer than the rest.  The extent is the diameter of
    the weight set (``2 Q1`` or ``2 Q2``), capped by ``delta_cap``.
    """
    vals = np.linalg.eigvalsh(0.5 * (Q + Q.T)) if Q.size else np.zeros(0)
    if vals.size == 0 or vals.min() > NULL_TOL * max(float(vals.max()), 0.0):
        return None
    spec = relaxed.smooth.spec if relaxed is not None else None
    extent = None
    if spec is not None and spec.family != "ols":
        extent = 2.0 * float(spec.Q2 if spec.family == "ridge" else spec.Q1)
    if delta_cap is not None:
        extent = delta_cap if extent is None else min(extent, delta_cap)
    return extent


def bound_frame(Q: np.ndarray, draws: np.ndarray, relaxed: RelaxedSet | None,
                delta_cap: float | None = None) -> tuple[float, np.ndarray | None]:
    """Shared scale ``kappa`` and optional basis for the bound programs of ``draws``.

    For positive definite ``Q`` the scale is the median ellipsoid size and no
    basis is used.  For singular ``Q`` the scale is the constraint-set extent
    and the basis runs along the eigenvectors of ``Q``: null directions keep
    unit length, range directions shrink to the size the basic inequality
    allows them, so every coordinate of the scaled program is of order one.
    """
    live = [g for g in draws if np.any(g)]
    k_draw = float(np.median([bound_scale(Q, g)[1] for g in live])) if live else 1.0
    extent = set_extent(Q, relaxed, delta_cap)
    if extent is None or not extent > k_draw:
        return k_draw, None
    q = bound_scale(Q, live[0])[0] if live else 1.0
    lam, U = np.linalg.eigh(0.5 * (Q + Q.T) / q)
    null = lam <= NULL_TOL * max(float(lam.max()), 0.0)
    # the null-space part of a draw lets range directions grow with b'g0 <= extent |g0|
    leak = float(np.median([np.linalg.norm(U[:, null].T @ g) / q for g in live])) if live else 0.0
    radius = np.full(lam.size, extent)
    rng_dir = ~null
    radius[rng_dir] = np.minimum(extent, np.maximum(k_draw, np.sqrt(2.0 * leak * extent / lam[rng_dir])))
    return extent, U * (radius / extent)


def canonicalize_bound(direction: str, p_tau: np.ndarray, Q: np.ndarray, g: np.ndarray,
                       relaxed: RelaxedSet | None, delta_cap: float | None = None,
                       Q_sqrt: np.ndarray | None = None, kappa: float | None = None,
                       basis: np.ndarray | None = None) -> BoundProgram | None:
    """``inf`` or ``sup`` of ``p'delta`` over the relaxed set and the basic inequality.

    The inequality ``delta'Q delta - 2 g'delta <= 0`` is encoded as the
    epigraph ``delta'Q delta <= t`` plus the linear row ``t - 2 g'delta <= 0``.
    Variables are rescaled by ``kappa`` (by default the draw's own ellipsoid
    size from ``bound_scale``) so the feasible region is of unit size.  Returns
    ``None`` when ``g = 0``: the basic inequality then forces ``Q delta = 0``
    and the caller treats the bound as 0 for positive definite ``Q``.
    With ``basis`` the program is posed in ``y`` where ``delta = kappa * basis @ y``.
    """
    if direction not in ("inf", "sup"):
        raise InvalidConfig(f"direction must be inf or sup, not {direction!r}")
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        return None
    d = p_tau.size
    q, k_own = bound_scale(Q, g)
    kappa = k_own if kappa is None else float(kappa)
    Qt = Q / q
    S = psd_sqrt(Qt) if Q_sqrt is None else Q_sqrt / math.sqrt(q)
    bld = _Builder()
    delta = bld.vars([f"delta[{i}]" for i in range(d)])
    t = bld.var("t")
    if relaxed is not None:
        _delta_rows(relaxed, bld, delta, kappa)
    if delta_cap is not None:
        cap = delta_cap / kappa
        bld.block("l", np.vstack([np.eye(d), -np.eye(d)]), delta, np.full(2 * d, cap))
    # t - (2/kappa) (g/q)'delta <= 0
    row = bld.block("l", np.r_[-(2.0 / kappa) * g / q, 1.0][None, :], np.r_[delta, t], np.zeros(1))
    G, h = norm_cone_epigraph(np.hstack([S, np.zeros((d, 1))]), np.r_[np.zeros(d), 1.0])
    bld.block("q", G, np.r_[delta, t], h)
    pmax = float(np.abs(p_tau).max())
    pn = p_tau / pmax if pmax > 0 else p_tau
    sign = 1.0 if direction == "inf" else -1.0
    prog = bld.build({int(delta[i]): sign * float(pn[i]) for i in range(d) if pn[i] != 0.0})
    if basis is not None:
        prog = _change_basis(prog, delta, basis)
    return BoundProgram(prog, delta, kappa * (pmax if pmax > 0 else 1.0), sign, kappa, row, q, basis)


def _change_basis(prog: ConicProgram, cols: np.ndarray, basis: np.ndarray) -> ConicProgram:
    """Substitute ``v[cols] = basis @ y`` in every row and in the objective."""
    c, A, G = prog.c.copy(), prog.A.copy(), prog.G.copy()
    c[cols] = basis.T @ c[cols]
    A[:, cols] = A[:, cols] @ basis
    G[:, cols] = G[:, cols] @ basis
    return ConicProgram(c, A, prog.b, G, prog.h, prog.cones, prog.labels)


@dataclass(frozen=True)
class BoundResult:
    value: float
    status: str
    delta: np.ndarray | None


def bound_value(bp: BoundProgram | None, sol: ConicSolution | None) -> BoundResult:
    if bp is None:
        return BoundResult(0.0, OPTIMAL, None)
    if sol.status == UNBOUNDED:
        return BoundResult(-math.inf * bp.sign, UNBOUNDED, None)
    if sol.status not in USABLE:
        return BoundResult(math.nan, sol.status, None)
    value = bp.sign * bp.value_scale * float(bp.program.c @ sol.x)
    return BoundResult(value, sol.status, bp.delta(sol.x))


def _worst(a: str, b: str) -> str:
    for st in (FAILED, MAX_ITER, INFEASIBLE, INACCURATE, UNBOUNDED):
        if st in (a, b):
            return st
    return OPTIMAL


def solve_bounds(p_tau: np.ndarray, Q: np.ndarray, draws: np.ndarray, relaxed: RelaxedSet | None,
                 delta_cap: float | None = None, tol: float = 1e-8,
                 max_iter: int = 200) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Lower and upper bounds of ``p'delta`` for each row of ``draws``.

    All 2S programs share one layout and go through a single batched solve.
    The status of a draw is the worse of its two programs.
    """
    Q_sqrt = psd_sqrt(Q)
    live = [s for s, g in enumerate(draws) if np.any(g)]
    slots: list[tuple[int, str, BoundProgram | None]] = []
    if live:
        # one scale for every draw keeps the layout identical, so the
        # programs differ only in the basic-inequality row
        kappa, basis = bound_frame(Q, draws, relaxed, delta_cap)
        templates = {d: canonicalize_bound(d, p_tau, Q, draws[live[0]], relaxed, delta_cap, Q_sqrt, kappa, basis)
                     for d in ("inf", "sup")}
    for s, g in enumerate(draws):
        for direction in ("inf", "sup"):
            bp = templates[direction].with_draw(g) if np.any(g) else None
            slots.append((s, direction, bp))
    sols = iter(solve_many([bp.program for _, _, bp in slots if bp is not None], tol, tol, max_iter))
    S = draws.shape[0]
    lo, hi = np.zeros(S), np.zeros(S)
    status = [OPTIMAL] * S
    for s, direction, bp in slots:
        res = bound_value(bp, next(sols) if bp is not None else None)
        (lo if direction == "inf" else hi)[s] = res.value
        status[s] = _worst(status[s], res.status)
    return lo, hi, status


def dump_program(program: ConicProgram, path: str | Path) -> None:
    """Plain-text sparse triplet dump for cross-checking with other solvers.

    Header lines ``n``, ``p``, ``m`` and ``cones`` are followed by sections
    ``c``, ``A``, ``b``, ``G``, ``h`` holding ``row col value`` (matrices) or
    ``index value`` (vectors) entries, zero-based, one per line.
    """
    lines = ["# stagsynth conic program v1", f"n {program.n}", f"p {program.b.size}",
             f"m {program.h.size}", "cones " + " ".join(f"{k}:{d}" for k, d in program.cones),
             "labels " + " ".join(program.labels)]
    for name in ("c", "b", "h"):
        vec = getattr(program, name)
        nz = np.flatnonzero(vec)
        lines.append(f"{name} {nz.size}")
        lines.extend(f"{i} {float(vec[i])!r}" for i in nz)
    for name in ("A", "G"):
        mat = getattr(program, name)
        r, c = np.nonzero(mat)
        lines.append(f"{name} {r.size}")
        lines.extend(f"{i} {j} {float(mat[i, j])!r}" for i, j in zip(r, c))
    Path(path).write_text("\n".join(lines) + "\n")


def load_program(path: str | Path) -> ConicProgram:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    it = iter(lines)
    n = int(next(it).split()[1])
    p = int(next(it).split()[1])
    m = int(next(it).split()[1])
    cones = tuple((k, int(d)) for k, d in (tok.split(":") for tok in next(it).split()[1:]))
    labels = tuple(next(it).split()[1:])
    sizes = {"c": n, "b": p, "h": m}
    vecs = {}
    for name in ("c", "b", "h"):
        count = int(next(it).split()[1])
        vec = np.zeros(sizes[name])
        for _ in range(count):
            i, v = next(it).split()
            vec[int(i)] = float(v)
        vecs[name] = vec
    mats = {}
    for name, rows in (("A", p), ("G", m)):
        count = int(next(it).split()[1])
        mat = np.zeros((rows, n))
        for _ in range(count):
            i, j, v = next(it).split()
            mat[int(i), int(j)] = float(v)
        mats[name] = mat
    return ConicProgram(vecs["c"], mats["A"], vecs["b"], mats["G"], vecs["h"], cones, labels)
