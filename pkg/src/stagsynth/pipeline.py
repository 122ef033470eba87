"""End-to-end estimation: design, weights, relaxed set, draws and intervals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import uncertainty as unc
from .config import PredictandSpec, StudyConfig
from .conic import WeightFit, estimate_weights
from .constraints import (RelaxedSet, RhoTuning, SmoothConstraints, epsilon_delta, epsilon_delta_simultaneous,
                          relax, to_smooth, tune_rho)
from .errors import InvalidConfig
from .panel import DesignMatrices, PanelDataset, build_design
from .predictands import PredictorVector, aggregate_cohort, build_predictor

LOGGER = logging.getLogger(__name__)


def period_specs(config: StudyConfig) -> list[PredictandSpec]:
    """Predictands covered by one run: a single one, or ``k = 0..horizon``."""
    spec = config.predictand
    if config.horizon is None:
        if config.simultaneous:
            raise InvalidConfig("simultaneous intervals need a horizon")
        return [spec]
    if spec.kind == "unit_average":
        raise InvalidConfig("unit_average has no event time to range over")
    return [replace(spec, k=k) for k in range(config.horizon + 1)]


@dataclass
class OosSide:
    """Out-of-sample inputs for one treated unit."""

    model: unc.OosModel
    x_cols: np.ndarray
    scale: float


@dataclass
class PreparedStudy:
    config: StudyConfig
    dataset: PanelDataset
    design: DesignMatrices
    fit: WeightFit
    smooth: SmoothConstraints
    rho: RhoTuning
    relaxed: RelaxedSet
    moments: unc.MomentModel
    predictors: list[PredictorVector]
    eps: list[float]
    task: unc.InSampleTask
    oos: dict[str, OosSide]


@dataclass
class StudyResult:
    prepared: PreparedStudy
    pointwise: list[unc.PredictionInterval]
    simultaneous: list[unc.PredictionInterval] = field(default_factory=list)

    @property
    def intervals(self) -> list[unc.PredictionInterval]:
        return self.simultaneous or self.pointwise


def _oos_models(design: DesignMatrices, fit: WeightFit, config: StudyConfig) -> dict[str, OosSide]:
    outcome = design.features[0]
    out = {}
    for u in design.treated:
        rows = design.unit_rows(u, outcome)
        scale = design.scales.get((u, outcome), 1.0)
        resid = fit.residuals[rows] * scale
        parts = [np.ones((rows.size, 1))]
        x_cols = np.asarray(design.w_cols[u])
        if config.e_regressors == "donors":
            parts.append(design.B[np.ix_(rows, x_cols)] * scale)
        else:
            x_cols = x_cols[:0]
        out[u] = OosSide(unc.fit_oos(u, resid, np.hstack(parts), config.oos_method), x_cols, scale)
    return out


def prepare(dataset: PanelDataset, config: StudyConfig) -> PreparedStudy:
    """Everything up to, but excluding, the batched bound-program solve."""
    spec = config.predictand
    if spec.kind == "cohort_att" and spec.strategy == "aggregate_unit":
        dataset = aggregate_cohort(dataset, spec.s0)
    specs = period_specs(config)
    # the largest event time has the smallest donor pool, valid for every k
    design = build_design(dataset, replace(config, predictand=specs[-1]))
    fit = estimate_weights(design, config.constraint, config.tol, config.max_iter)
    smooth = to_smooth(config.constraint, design)
    beta = fit.beta
    rho = tune_rho(design, fit.residuals, smooth, beta, config.cointegrated, config.rho_constant)
    relaxed = relax(smooth, beta, rho.rho_j)
    mu = (unc.estimate_conditional_mean(design, fit.residuals, config.u_lags) if config.u_missp
          else np.zeros_like(fit.residuals))
    moments = unc.estimate_sigma(design, fit.residuals, mu, config.cov_method, config.newey_west)
    predictors = [build_predictor(s, dataset, design) for s in specs]
    unit_cols = {u: design.unit_cols(u) for u in design.treated}
    eps = [epsilon_delta(smooth, beta, p.p_tau, rho.rho_unit, p.units, relaxed, unit_cols) for p in predictors]
    draws = unc.gaussian_draws(moments.Sigma_hat, config.draws, config.seed)
    task = unc.InSampleTask(np.stack([p.p_tau for p in predictors]), moments.Q_hat, draws, relaxed,
                            config.delta_cap)
    oos = _oos_models(design, fit, config)
    return PreparedStudy(config, dataset, design, fit, smooth, rho, relaxed, moments, predictors, eps, task, oos)


def _cell_mean(side: OosSide, row: np.ndarray) -> float:
    x = np.r_[1.0, row[side.x_cols]][: side.model.theta.size]
    return side.model.mean(x)


def _oos_point(prep: PreparedStudy, pv: PredictorVector, alpha2: float) -> tuple[float, float]:
    cfg = prep.config
    method = cfg.oos_method
    mean = sum(r.weight * _cell_mean(prep.oos[r.unit], r.row) for r in pv.post_rows)
    sigma = unc.combine_sigmas([prep.oos[r.unit].model.sigma for r in pv.post_rows], cfg.sigma_average)
    if method == "subgaussian":
        return unc.outsample_subgaussian(mean, sigma, alpha2)
    if method == "location_scale":
        z = np.concatenate([prep.oos[u].model.standardized for u in pv.units])
        return unc.outsample_location_scale(z, mean, sigma, alpha2)
    lo = hi = 0.0
    for r in pv.post_rows:
        m = prep.oos[r.unit].model
        x = np.r_[1.0, r.row[prep.oos[r.unit].x_cols]][: m.X_pre.shape[1]]
        a, b = unc.outsample_quantile(m.residuals, m.X_pre, x, alpha2)
        lo += r.weight * a
        hi += r.weight * b
    return lo, hi


def _oos_mean_sigma(prep: PreparedStudy, pv: PredictorVector) -> tuple[float, float]:
    mean = sum(r.weight * _cell_mean(prep.oos[r.unit], r.row) for r in pv.post_rows)
    sigma = unc.combine_sigmas([prep.oos[r.unit].model.sigma for r in pv.post_rows], prep.config.sigma_average)
    return mean, sigma


def _oos_simultaneous(prep: PreparedStudy) -> list[tuple[float, float]]:
    cfg = prep.config
    L = len(prep.predictors) - 1
    method = cfg.sim_method
    if method == "bonferroni":
        return [_oos_point(prep, pv, cfg.alpha2 / (L + 1)) for pv in prep.predictors]
    ms = [_oos_mean_sigma(prep, pv) for pv in prep.predictors]
    if method == "max_ineq":
        hw = unc.maxineq_halfwidth(max(s for _, s in ms), L, cfg.alpha2)
        return [(m - hw, m + hw) for m, _ in ms]
    # Scheffe: per-period scale from the joint residual covariance, averaged over units
    sd = {}
    for u in {u for pv in prep.predictors for u in pv.units}:
        model = prep.oos[u].model
        cov = unc.joint_residual_covariance(model.residuals - model.X_pre @ model.theta, L)
        sd[u] = np.sqrt(np.diag(cov))
    out = []
    for k, (pv, (m, _)) in enumerate(zip(prep.predictors, ms)):
        s_kk = float(np.mean([sd[u][k] for u in pv.units]))
        hw = unc.scheffe_halfwidth(s_kk, L, cfg.alpha2)
        out.append((m - hw, m + hw))
    return out


def finish(prep: PreparedStudy, bounds: unc.DrawBounds) -> StudyResult:
    cfg = prep.config
    beta = prep.fit.beta
    diag = {"rho": dict(prep.rho.rho_unit), "active": prep.relaxed.report(),
            "inexact_programs": bounds.inexact, "unbounded_programs": bounds.unbounded,
            "sigma_trace": float(np.trace(prep.moments.Sigma_hat)), "fit_status": prep.fit.status}
    pointwise = []
    for k, pv in enumerate(prep.predictors):
        m1 = unc.pointwise_bounds(bounds, k, cfg.alpha1)
        m2 = _oos_point(prep, pv, cfg.alpha2)
        pointwise.append(unc.assemble(pv.tau_hat(beta), (m1.M1L, m1.M1U), m2, prep.eps[k], cfg.alpha1,
                                      cfg.alpha2, pv.label, draws_used=m1.draws_used,
                                      diagnostics={**diag, "failures": m1.failures}))
    simultaneous = []
    if cfg.simultaneous:
        m1 = unc.joint_bounds(bounds, cfg.alpha1)
        eps = epsilon_delta_simultaneous(prep.eps)
        group = f"{cfg.predictand.kind}[0..{len(prep.predictors) - 1}]"
        for pv, m2 in zip(prep.predictors, _oos_simultaneous(prep)):
            simultaneous.append(unc.assemble(pv.tau_hat(beta), (m1.M1L, m1.M1U), m2, eps, cfg.alpha1,
                                             cfg.alpha2, pv.label, True, group, m1.draws_used,
                                             {**diag, "failures": m1.failures, "sim_method": cfg.sim_method}))
    return StudyResult(prep, pointwise, simultaneous)


def run_many(jobs: Sequence[tuple[PanelDataset, StudyConfig]]) -> list[StudyResult]:
    """Run several studies, solving all their bound programs in one batch."""
    preps = [prepare(ds, cfg) for ds, cfg in jobs]
    if not preps:
        return []
    tol = min(p.config.tol for p in preps)
    max_iter = max(p.config.max_iter for p in preps)
    bounds = unc.run_tasks([p.task for p in preps], tol, max_iter)
    return [finish(p, b) for p, b in zip(preps, bounds)]


def run_intervals(dataset: PanelDataset, config: StudyConfig) -> StudyResult:
    return run_many([(dataset, config)])[0]
