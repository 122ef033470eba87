"""In-sample and out-of-sample bounds and their assembly into prediction intervals."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import gammainc

from .conic import USABLE, UNBOUNDED, bound_frame, bound_value, canonicalize_bound, psd_sqrt, solve_many
from .constraints import RelaxedSet
from .errors import (
    InvalidConfig,
    MissingJointCovariance,
    SolverFailure,
    TooFewResiduals,
    TooManyFailures,
)
from .panel import DesignMatrices

LOGGER = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10
MIN_RESIDUALS = 10
RIDGE_FALLBACK = 1e-8


# --------------------------------------------------------------------------- moments


@dataclass(frozen=True)
class MomentModel:
    mu_hat: np.ndarray
    Sigma_hat: np.ndarray
    weights: np.ndarray  # omega^2 per design row
    method: str
    Q_hat: np.ndarray
    gamma_hat: np.ndarray


def _lstsq_fit(X: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    """Least squares, with a tiny ridge when X is rank deficient."""
    if X.shape[1] == 0:
        return np.zeros(0)
    rank = np.linalg.matrix_rank(X) if X.size else 0
    if rank < X.shape[1]:
        LOGGER.info("%s: regressors rank deficient (%d < %d), using ridge %.0e",
                    what, rank, X.shape[1], RIDGE_FALLBACK)
        k = X.shape[1]
        return np.linalg.solve(X.T @ X + RIDGE_FALLBACK * np.eye(k), X.T @ y)
    return np.linalg.lstsq(X, y, rcond=None)[0]


def estimate_conditional_mean(design: DesignMatrices, u_hat: np.ndarray, lag_order: int = 1) -> np.ndarray:
    """Fitted ``E[u | B]`` from a per-unit, per-feature regression on B and its lags.

    Each regression has an intercept, the unit's donor columns and
    ``lag_order`` lags of them; lags reaching before the first kept row are
    set to zero.
    """
    mu = np.zeros_like(u_hat)
    for u in design.treated:
        cols = design.w_cols[u]
        for f in design.features:
            rows = design.unit_rows(u, f)
            if rows.size == 0:
                continue
            Bf = design.B[np.ix_(rows, cols)]
            parts = [np.ones((rows.size, 1)), Bf]
            for lag in range(1, lag_order + 1):
                lagged = np.zeros_like(Bf)
                lagged[lag:] = Bf[:-lag]
                parts.append(lagged)
            X = np.hstack(parts)
            theta = _lstsq_fit(X, u_hat[rows], f"conditional mean of {u}/{f}")
            mu[rows] = X @ theta
    return mu


def _leverage(Z: np.ndarray) -> np.ndarray:
    if Z.shape[1] == 0:
        return np.zeros(Z.shape[0])
    q, _ = np.linalg.qr(Z)
    rank = np.linalg.matrix_rank(Z)
    if rank < Z.shape[1]:
        u, s, _ = np.linalg.svd(Z, full_matrices=False)
        q = u[:, s > s.max() * 1e-12]
    return np.clip((q**2).sum(axis=1), 0.0, 1.0 - 1e-12)


def hc_weights(resid: np.ndarray, Z: np.ndarray, method: str) -> np.ndarray:
    """Squared-residual weights ``omega^2`` for HC0 to HC3."""
    n, d = Z.shape
    e2 = resid**2
    if method == "HC0":
        return e2
    if method == "HC1":
        return e2 * (n / (n - d) if n > d else 1.0)
    lev = _leverage(Z)
    if method == "HC2":
        return e2 / (1.0 - lev)
    if method == "HC3":
        return e2 / (1.0 - lev) ** 2
    raise InvalidConfig(f"unknown covariance method {method!r}")


def estimate_sigma(design: DesignMatrices, u_hat: np.ndarray, mu_hat: np.ndarray | None = None,
                   method: str = "HC1", newey_west: bool = False) -> MomentModel:
    """Conditional variance of ``gamma_hat = Z'V u`` treating rows as uncorrelated.

    With ``newey_west`` the cross products of rows within the same
    (unit, feature) series are added with Bartlett weights up to lag
    ``floor(T0^(1/3))``.
    """
    Z = design.Z
    VZ = design.V @ Z
    mu = np.zeros_like(u_hat) if mu_hat is None else mu_hat
    resid = u_hat - mu
    w = hc_weights(resid, Z, method)
    Sigma = (VZ * w[:, None]).T @ VZ
    if newey_west:
        scale = w / np.where(resid**2 > 0, resid**2, 1.0)
        scaled = resid * np.sqrt(np.where(resid**2 > 0, scale, 0.0))
        for u in design.treated:
            lag_max = int(math.floor(design.T0_per_unit[u] ** (1.0 / 3.0)))
            for f in design.features:
                rows = design.unit_rows(u, f)
                X = VZ[rows] * scaled[rows, None]
                for lag in range(1, min(lag_max, rows.size - 1) + 1):
                    wt = 1.0 - lag / (lag_max + 1.0)
                    G = X[lag:].T @ X[:-lag]
                    Sigma += wt * (G + G.T)
    Sigma = 0.5 * (Sigma + Sigma.T)
    Q = Z.T @ design.V @ Z
    gamma = VZ.T @ u_hat
    return MomentModel(mu, Sigma, w, method, 0.5 * (Q + Q.T), gamma)


# --------------------------------------------------------------------------- draws and quantiles


def draw_stream(seed: int, s: int) -> np.random.Generator:
    """Counter-based stream for draw ``s``: Philox keyed by ``(seed, s)``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, s], dtype=np.uint64)))


def gaussian_draws(Sigma: np.ndarray, S: int, seed: int) -> np.ndarray:
    """``S`` draws from ``N(0, Sigma)``; row ``s`` depends only on ``(seed, s)``."""
    d = Sigma.shape[0]
    tr = float(np.trace(Sigma))
    if d == 0 or tr <= 0.0:
        return np.zeros((S, d))
    L = np.linalg.cholesky(Sigma + 1e-12 * tr / d * np.eye(d))
    xi = np.stack([draw_stream(seed, s).standard_normal(d) for s in range(S)])
    return xi @ L.T


def order_index(q: float, S: int) -> int:
    """One-based order statistic ``ceil(q S)`` clamped to ``[1, S]``."""
    # guard against q*S landing a hair above an integer
    return min(max(int(math.ceil(q * S - 1e-9)), 1), S)


def order_quantile(values: np.ndarray, q: float) -> float:
    vals = np.sort(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise TooManyFailures("no usable draws")
    return float(vals[order_index(q, vals.size) - 1])


# --------------------------------------------------------------------------- in-sample bounds


@dataclass
class InSampleTask:
    """Bound programs for one set of draws and one or more predictor vectors.

    Every row of ``P`` shares the draws, so pointwise and joint quantiles come
    from the same solves.
    """

    P: np.ndarray
    Q: np.ndarray
    draws: np.ndarray
    relaxed: RelaxedSet | None
    delta_cap: float | None = None
    _slots: list = field(default_factory=list, repr=False)

    def programs(self) -> list:
        S = self.draws.shape[0]
        Q_sqrt = psd_sqrt(self.Q)
        live = [s for s in range(S) if np.any(self.draws[s])]
        self._slots = []
        out = []
        if not live:
            return out
        kappa, basis = bound_frame(self.Q, self.draws, self.relaxed, self.delta_cap)
        for k, p in enumerate(self.P):
            templates = {d: canonicalize_bound(d, p, self.Q, self.draws[live[0]], self.relaxed,
                                               self.delta_cap, Q_sqrt, kappa, basis) for d in ("inf", "sup")}
            for s in live:
                for d in ("inf", "sup"):
                    bp = templates[d].with_draw(self.draws[s])
                    self._slots.append((k, s, d, bp))
                    out.append(bp.program)
        return out

    def collect(self, solutions: Sequence) -> "DrawBounds":
        K, S = self.P.shape[0], self.draws.shape[0]
        lo = np.zeros((K, S))
        hi = np.zeros((K, S))
        ok = np.ones((K, S), dtype=bool)
        inexact = np.zeros((K, S), dtype=bool)
        unbounded = 0
        for (k, s, d, bp), sol in zip(self._slots, solutions):
            res = bound_value(bp, sol)
            # delta = 0 is feasible with objective 0, so the exact optimum straddles 0
            if d == "inf":
                lo[k, s] = min(res.value, 0.0)
            else:
                hi[k, s] = max(res.value, 0.0)
            if res.status not in USABLE and res.status != UNBOUNDED:
                ok[k, s] = False
            inexact[k, s] |= res.status != "optimal"
            unbounded += res.status == UNBOUNDED
        return DrawBounds(lo, hi, ok, int(inexact.sum()), unbounded)


@dataclass(frozen=True)
class DrawBounds:
    lower: np.ndarray  # (K, S)
    upper: np.ndarray
    ok: np.ndarray
    inexact: int
    unbounded: int


@dataclass(frozen=True)
class InSampleBounds:
    M1L: float
    M1U: float
    lower_draws: np.ndarray
    upper_draws: np.ndarray
    draws_used: int
    failures: int


def run_tasks(tasks: Sequence[InSampleTask], tol: float = 1e-8, max_iter: int = 200) -> list[DrawBounds]:
    """Solve the bound programs of several tasks in one batched pass."""
    progs = [task.programs() for task in tasks]
    flat = solve_many([p for group in progs for p in group], tol, tol, max_iter)
    out, pos = [], 0
    for task, group in zip(tasks, progs):
        out.append(task.collect(flat[pos : pos + len(group)]))
        pos += len(group)
    return out


def _quantiles(lo: np.ndarray, hi: np.ndarray, ok: np.ndarray, alpha1: float) -> InSampleBounds:
    S = ok.size
    fails = int((~ok).sum())
    if fails > MAX_FAILURE_SHARE * S:
        raise TooManyFailures(f"{fails} of {S} bound-program draws failed")
    if fails:
        LOGGER.warning("%d of %d bound-program draws failed and were dropped", fails, S)
    lo_ok, hi_ok = lo[ok], hi[ok]
    return InSampleBounds(order_quantile(lo_ok, alpha1 / 2.0), order_quantile(hi_ok, 1.0 - alpha1 / 2.0),
                          lo_ok, hi_ok, int(ok.sum()), fails)


def pointwise_bounds(db: DrawBounds, k: int, alpha1: float) -> InSampleBounds:
    return _quantiles(db.lower[k], db.upper[k], db.ok[k], alpha1)


def joint_bounds(db: DrawBounds, alpha1: float) -> InSampleBounds:
    """Quantiles of the per-draw inf and sup taken jointly over all rows of ``P``."""
    return _quantiles(db.lower.min(axis=0), db.upper.max(axis=0), db.ok.all(axis=0), alpha1)


def simulate_insample(S: int, seed: int, p_tau: np.ndarray, Q: np.ndarray, Sigma: np.ndarray,
                      relaxed: RelaxedSet | None, alpha1: float, delta_cap: float | None = None,
                      tol: float = 1e-8, max_iter: int = 200) -> InSampleBounds:
    draws = gaussian_draws(Sigma, S, seed)
    task = InSampleTask(np.atleast_2d(p_tau), Q, draws, relaxed, delta_cap)
    return pointwise_bounds(run_tasks([task], tol, max_iter)[0], 0, alpha1)


# --------------------------------------------------------------------------- out-of-sample bounds


def subgaussian_halfwidth(sigma: float, alpha2: float, n_events: int = 1) -> float:
    """``sqrt(2 sigma^2 log(2 n / alpha2))``; ``n_events > 1`` is the max-inequality form."""
    return math.sqrt(2.0 * sigma**2 * math.log(2.0 * n_events / alpha2))


def outsample_subgaussian(mean: float, sigma: float, alpha2: float) -> tuple[float, float]:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    hw = subgaussian_halfwidth(sigma, alpha2)
    return mean - hw, mean + hw


def combine_sigmas(sigmas: Sequence[float], mode: str = "mean") -> float:
    """Scale of an average of sub-Gaussian errors.

    ``mean`` is valid under any dependence; ``independent`` is
    ``sqrt(sum sigma^2) / n``.
    """
    s = np.asarray(sigmas, dtype=float)
    if mode == "mean":
        return float(s.mean())
    if mode == "independent":
        return float(math.sqrt((s**2).sum()) / s.size)
    raise InvalidConfig(f"unknown sigma combination {mode!r}")


@dataclass(frozen=True)
class OosModel:
    """Pre-treatment residual model for one treated unit."""

    unit: str
    residuals: np.ndarray
    X_pre: np.ndarray
    theta: np.ndarray
    sigma: float
    method: str

    def mean(self, x_post: np.ndarray) -> float:
        return float(x_post @ self.theta)

    @property
    def standardized(self) -> np.ndarray:
        fitted = self.X_pre @ self.theta
        if self.sigma == 0:
            return np.zeros_like(self.residuals)
        return (self.residuals - fitted) / self.sigma


def fit_oos(unit: str, residuals: np.ndarray, X_pre: np.ndarray, method: str = "subgaussian") -> OosModel:
    """Linear mean model plus a homoskedastic scale with a degrees-of-freedom correction."""
    n, k = X_pre.shape
    if n <= k:
        LOGGER.warning("unit %s: %d residuals for %d regressors, using an intercept only", unit, n, k)
        X_pre = X_pre[:, :1]
        k = 1
    theta = _lstsq_fit(X_pre, residuals, f"out-of-sample mean of {unit}")
    resid = residuals - X_pre @ theta
    dof = n - k
    sigma = float(math.sqrt(resid @ resid / dof)) if dof > 0 else float(np.abs(resid).max(initial=0.0))
    return OosModel(unit, residuals, X_pre, theta, sigma, method)


def outsample_location_scale(standardized: np.ndarray, mean: float, sigma: float,
                             alpha2: float) -> tuple[float, float]:
    z = np.asarray(standardized, dtype=float)
    if z.size < MIN_RESIDUALS:
        raise TooFewResiduals(f"location-scale bounds need {MIN_RESIDUALS} residuals, got {z.size}")
    lo, hi = np.quantile(z, [alpha2 / 2.0, 1.0 - alpha2 / 2.0])
    return mean + sigma * float(lo), mean + sigma * float(hi)


def quantile_fit(y: np.ndarray, X: np.ndarray, q: float) -> np.ndarray:
    """Linear quantile regression by the pinball-loss linear program."""
    n, k = X.shape
    # variables: theta (free), u+ >= 0, u- >= 0 with y = X theta + u+ - u-
    c = np.concatenate([np.zeros(k), np.full(n, q), np.full(n, 1.0 - q)])
    A_eq = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverFailure(f"quantile regression failed: {res.message}")
    return res.x[:k]


def outsample_quantile(residuals: np.ndarray, X_pre: np.ndarray, x_post: np.ndarray,
                       alpha2: float) -> tuple[float, float]:
    th_lo = quantile_fit(residuals, X_pre, alpha2 / 2.0)
    th_hi = quantile_fit(residuals, X_pre, 1.0 - alpha2 / 2.0)
    lo, hi = float(np.asarray(x_post) @ th_lo), float(np.asarray(x_post) @ th_hi)
    return (lo, hi) if lo <= hi else (hi, lo)


def chi2_quantile(p: float, dof: int, tol: float = 1e-12) -> float:
    """Chi-square quantile by bisection on the regularized lower incomplete gamma."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = 0.0, max(1.0, float(dof))
    while gammainc(dof / 2.0, hi / 2.0) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gammainc(dof / 2.0, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def maxineq_halfwidth(sigma_max: float, L: int, alpha2: float) -> float:
    return subgaussian_halfwidth(sigma_max, alpha2, n_events=L + 1)


def bonferroni_halfwidth(sigma: float, L: int, alpha2: float) -> float:
    return subgaussian_halfwidth(sigma, alpha2 / (L + 1))


def scheffe_halfwidth(sigma_kk: float, L: int, alpha2: float) -> float:
    return sigma_kk * math.sqrt(chi2_quantile(1.0 - alpha2, L + 1))


def joint_residual_covariance(residuals: np.ndarray, L: int) -> np.ndarray:
    """Covariance of ``L + 1`` consecutive residuals from overlapping windows."""
    r = np.asarray(residuals, dtype=float)
    n_win = r.size - L
    if n_win < 2:
        raise MissingJointCovariance(f"need more than {L + 1} pre-treatment residuals for a joint covariance")
    W = np.stack([r[i : i + L + 1] for i in range(n_win)])
    return W.T @ W / n_win


# --------------------------------------------------------------------------- assembly


@dataclass(frozen=True)
class PredictionInterval:
    label: str
    tau_hat: float
    M1L: float
    M1U: float
    M2L: float
    M2U: float
    eps_delta: float
    lower: float
    upper: float
    alpha1: float
    alpha2: float
    simultaneous: bool = False
    group: str | None = None
    draws_used: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def assemble(tau_hat: float, M1: tuple[float, float], M2: tuple[float, float], eps_delta: float,
             alpha1: float = 0.05, alpha2: float = 0.05, label: str = "", simultaneous: bool = False,
             group: str | None = None, draws_used: int = 0, diagnostics: dict | None = None) -> PredictionInterval:
    M1L, M1U = M1
    M2L, M2U = M2
    lower = tau_hat + M1L - M2U - eps_delta
    upper = tau_hat + M1U - M2L + eps_delta
    return PredictionInterval(label, float(tau_hat), float(M1L), float(M1U), float(M2L), float(M2U),
                              float(eps_delta), float(lower), float(upper), alpha1, alpha2,
                              simultaneous, group, draws_used, dict(diagnostics or {}))
