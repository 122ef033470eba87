"""Weight constraints, the relaxed simulation set and its tuning parameters."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import ConstraintSpec
from .errors import DegenerateScale, InvalidConfig, UnsupportedFamily
from .panel import DesignMatrices

LOGGER = logging.getLogger(__name__)

FEAS_SLACK = 1e-7


@dataclass(frozen=True)
class Constraint:
    """One scalar constraint ``m(beta) = 0`` or ``m(beta) <= 0``.

    ``kind`` is one of ``sum`` (1'w - Q1), ``nonneg`` (-w_j), ``l1``
    (||w||_1 - Q1) or ``l2`` (||w||^2 - Q2^2); ``cols`` index the weights it
    touches and ``bound`` holds Q1 or Q2^2.
    """

    unit: str
    kind: str
    cols: np.ndarray
    bound: float
    d: int

    @property
    def linear(self) -> bool:
        return self.kind in ("sum", "nonneg", "l1")

    def value(self, beta: np.ndarray) -> float:
        w = beta[self.cols]
        if self.kind == "sum":
            return float(w.sum() - self.bound)
        if self.kind == "nonneg":
            return float(-w[0])
        if self.kind == "l1":
            return float(np.abs(w).sum() - self.bound)
        return float(w @ w - self.bound)

    def grad(self, beta: np.ndarray) -> np.ndarray:
        g = np.zeros(self.d)
        w = beta[self.cols]
        if self.kind == "sum":
            g[self.cols] = 1.0
        elif self.kind == "nonneg":
            g[self.cols] = -1.0
        elif self.kind == "l1":
            # orthant-wise gradient; zero coordinates count as either sign
            g[self.cols] = np.where(w == 0, 1.0, np.sign(w))
        else:
            g[self.cols] = 2.0 * w
        return g

    def hess(self, beta: np.ndarray) -> np.ndarray:
        H = np.zeros((self.d, self.d))
        if self.kind == "l2":
            H[self.cols, self.cols] = 2.0
        return H


@dataclass(frozen=True)
class SmoothConstraints:
    equalities: tuple[Constraint, ...]
    inequalities: tuple[Constraint, ...]
    spec: ConstraintSpec
    units: tuple[str, ...]

    def unit_inequalities(self, unit: str) -> list[int]:
        return [j for j, c in enumerate(self.inequalities) if c.unit == unit]

    def feasible(self, beta: np.ndarray, slack: float = FEAS_SLACK) -> bool:
        return (all(abs(c.value(beta)) <= slack for c in self.equalities)
                and all(c.value(beta) <= slack for c in self.inequalities))


def to_smooth(spec: ConstraintSpec, design: DesignMatrices) -> SmoothConstraints:
    d = design.d
    eqs: list[Constraint] = []
    ins: list[Constraint] = []
    fam = spec.family
    if fam not in ("simplex", "lasso", "ridge", "l1l2", "ols"):
        raise UnsupportedFamily(f"unknown family {fam!r}")
    for u in design.treated:
        cols = np.asarray(design.w_cols[u])
        spec.check_dims(len(cols))
        if fam in ("simplex", "l1l2"):
            eqs.append(Constraint(u, "sum", cols, float(spec.Q1), d))
            ins.extend(Constraint(u, "nonneg", np.array([c]), 0.0, d) for c in cols)
        if fam == "lasso":
            ins.append(Constraint(u, "l1", cols, float(spec.Q1), d))
        if fam in ("ridge", "l1l2"):
            ins.append(Constraint(u, "l2", cols, float(spec.Q2) ** 2, d))
    return SmoothConstraints(tuple(eqs), tuple(ins), spec, tuple(design.treated))


def rho_formula(T0: float, C: float, c: float) -> float:
    """``C log(T0)^c / sqrt(T0)``."""
    return float(C * math.log(T0) ** c / math.sqrt(T0))


@dataclass(frozen=True)
class RhoTuning:
    rho_unit: Mapping[str, float]
    rho_j: np.ndarray
    constants: Mapping[str, float]


def tune_rho(design: DesignMatrices, u_hat: np.ndarray, smooth: SmoothConstraints, beta_hat: np.ndarray,
             cointegrated: bool = False, constant: str = "C1") -> RhoTuning:
    c = 1.0 if cointegrated else 0.5
    rho_unit: dict[str, float] = {}
    consts: dict[str, float] = {}
    for u in design.treated:
        rows = design.unit_rows(u)
        T0 = design.T0_per_unit[u]
        if T0 < 2:
            raise DegenerateScale(f"unit {u!r}: need at least 2 pre-treatment periods to tune rho")
        Bu = design.B[np.ix_(rows, design.w_cols[u])]
        uu = u_hat[rows]
        sd_b = Bu.std(axis=0, ddof=1) if rows.size > 1 else np.zeros(Bu.shape[1])
        if np.any(sd_b <= 0):
            raise DegenerateScale(f"unit {u!r}: a donor column has zero variance")
        sd_u = float(uu.std(ddof=1))
        if constant == "C1":
            C = sd_u / sd_b.min()
        elif constant == "C2":
            C = sd_b.max() * sd_u / sd_b.min() ** 2
        elif constant == "C3":
            cov = ((Bu - Bu.mean(axis=0)) * (uu - uu.mean())[:, None]).sum(axis=0) / (rows.size - 1)
            C = np.abs(cov).max() / sd_b.min() ** 2
        else:
            raise InvalidConfig(f"unknown rho constant {constant!r}")
        consts[u] = float(C)
        rho_unit[u] = rho_formula(T0, float(C), c)
    rho_j = np.array([np.abs(con.grad(beta_hat)).sum() * rho_unit[con.unit] for con in smooth.inequalities])
    return RhoTuning(rho_unit, rho_j, consts)


@dataclass(frozen=True)
class RelaxedSet:
    """Centered constraint set for ``delta = beta - beta_hat``.

    Equalities become ``m_eq(beta_hat + delta) = m_eq(beta_hat)``; inequality
    ``j`` becomes ``m_j(beta_hat + delta) <= rhs[j]`` with ``rhs[j] =
    m_j(beta_hat)`` on the active set and 0 elsewhere.
    """

    smooth: SmoothConstraints
    beta_hat: np.ndarray
    active: np.ndarray
    rhs: np.ndarray
    rho_j: np.ndarray

    @property
    def active_set(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.active)]

    def contains(self, delta: np.ndarray, tol: float = 1e-9) -> bool:
        beta = self.beta_hat + delta
        for con in self.smooth.equalities:
            if abs(con.value(beta) - con.value(self.beta_hat)) > tol:
                return False
        return all(con.value(beta) <= r + tol for con, r in zip(self.smooth.inequalities, self.rhs))

    def report(self) -> list[dict]:
        out = []
        for j, con in enumerate(self.smooth.inequalities):
            if self.active[j]:
                out.append({"unit": con.unit, "kind": con.kind, "cols": [int(c) for c in con.cols],
                            "value": float(con.value(self.beta_hat)), "rho": float(self.rho_j[j])})
        return out


def relax(smooth: SmoothConstraints, beta_hat: np.ndarray, rho_j: Sequence[float]) -> RelaxedSet:
    rho_j = np.asarray(rho_j, dtype=float)
    if rho_j.shape != (len(smooth.inequalities),):
        raise ValueError("one rho per inequality constraint is required")
    vals = np.array([con.value(beta_hat) for con in smooth.inequalities])
    worst = max([0.0, *vals, *(abs(c.value(beta_hat)) for c in smooth.equalities)])
    if worst > FEAS_SLACK:
        LOGGER.warning("reference weights violate a constraint by %.3g", worst)
    active = vals > -rho_j
    near = active & (vals < -FEAS_SLACK)
    if near.any():
        LOGGER.info("%d constraints within rho of the boundary are treated as binding", int(near.sum()))
    rhs = np.where(active, vals, 0.0)
    return RelaxedSet(smooth, np.asarray(beta_hat, dtype=float).copy(), active, rhs, rho_j)


def epsilon_delta(smooth: SmoothConstraints, beta_hat: np.ndarray, p_tau: np.ndarray,
                  rho_unit: Mapping[str, float], units: Sequence[str],
                  relaxed: RelaxedSet | None = None,
                  unit_cols: Mapping[str, Sequence[int]] | None = None) -> float:
    """Curvature widening, summed over the predictand's treated units.

    Only inequalities in the active set enter (all of the unit's inequalities
    when ``relaxed`` is omitted).  ``unit_cols`` gives each unit's full
    coefficient block for the ``||p||_1`` factor; it defaults to the weight
    columns.  Returns ``inf`` if the active Jacobian is singular.
    """
    total = 0.0
    for u in units:
        idx = smooth.unit_inequalities(u)
        if relaxed is not None:
            idx = [j for j in idx if relaxed.active[j]]
        cons = [smooth.inequalities[j] for j in idx]
        if not cons:
            continue
        h_max = max(float(np.linalg.norm(c.hess(beta_hat), 2)) for c in cons)
        rho = float(rho_unit[u])
        if h_max == 0.0 or rho == 0.0:
            continue
        # restrict to the weight columns: covariate coefficients are unconstrained
        wcols = np.unique(np.concatenate([c.cols for c in smooth.inequalities if c.unit == u]))
        jac = np.array([c.grad(beta_hat)[wcols] for c in cons])
        sv = np.linalg.svd(jac, compute_uv=False)
        s_min = float(sv.min()) if sv.size else 0.0
        if s_min <= 1e-12 * max(1.0, float(sv.max(initial=0.0))):
            LOGGER.warning("singular constraint Jacobian for unit %r; widening is unbounded", u)
            return math.inf
        block = wcols if unit_cols is None else np.asarray(unit_cols[u], dtype=int)
        p1 = float(np.abs(p_tau[block]).sum())
        total += p1 * math.sqrt(len(cons)) / 2.0 / s_min * h_max * rho**2
    return total


def epsilon_delta_simultaneous(per_period: Sequence[float]) -> float:
    vals = list(per_period)
    if not vals:
        raise ValueError("need at least one period")
    return float(max(vals))
