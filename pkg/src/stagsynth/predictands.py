"""Predictor vectors for the four treatment-effect predictands."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import PredictandSpec
from .errors import EmptyCohort, InvalidConfig, MissingDonorOutcome, PeriodOutOfRange
from .panel import DesignMatrices, PanelDataset, covariate_value

LOGGER = logging.getLogger(__name__)

AVE_UNIT = "ave"


@dataclass(frozen=True)
class PostRow:
    unit: str
    t: int
    weight: float
    row: np.ndarray  # full length-d predictor, zero outside the unit's block


@dataclass(frozen=True)
class PredictorVector:
    p_tau: np.ndarray
    observed: float
    label: str
    post_rows: tuple[PostRow, ...]
    units: tuple[str, ...]
    n_observed: int

    def tau_hat(self, beta: np.ndarray) -> float:
        return float(self.observed - self.p_tau @ beta)


def predictor_row(dataset: PanelDataset, design: DesignMatrices, unit: str, t: int) -> np.ndarray:
    """``p_t`` for any period, embedded in the full coefficient vector."""
    if unit not in design.treated:
        raise InvalidConfig(f"unit {unit!r} is not a treated unit of the design")
    ti = dataset.time_index(t)
    outcome = dataset.outcome
    donors = design.donor_pools[unit]
    x = np.array([dataset.cube[dataset.unit_index(j), ti, 0] for j in donors])
    if not np.all(np.isfinite(x)):
        missing = [j for j, v in zip(donors, x) if not np.isfinite(v)]
        raise MissingDonorOutcome(f"donor outcomes missing at t={t} for unit {unit!r}: {missing}")
    scale = design.scales.get((unit, outcome), 1.0)
    g = np.array([covariate_value(lab, outcome, t) for lab in design.r_labels[unit]]) * scale
    row = np.zeros(design.d)
    row[design.w_cols[unit]] = x
    row[design.r_cols[unit]] = g
    return row


def build_post_row(dataset: PanelDataset, design: DesignMatrices, unit: str, t: int) -> np.ndarray:
    """Unit block ``(x_t, g_t)`` of the post-treatment predictor."""
    Ti = dataset.adoption.get(unit, math.inf)
    if math.isinf(Ti):
        raise InvalidConfig(f"unit {unit!r} is never treated")
    if t < Ti:
        raise PeriodOutOfRange(f"period {t} precedes adoption {int(Ti)} of unit {unit!r}")
    row = predictor_row(dataset, design, unit, t)
    return row[design.unit_cols(unit)]


def _outcome(dataset: PanelDataset, unit: str, t: int) -> float:
    return float(dataset.cube[dataset.unit_index(unit), dataset.time_index(t), 0])


def _check_period(dataset: PanelDataset, t: int, what: str) -> None:
    if t > dataset.t_max:
        raise PeriodOutOfRange(f"{what}: period {t} beyond last period {dataset.t_max}")


def _combine(dataset, design, cells, label, units) -> PredictorVector:
    """Average ``observed - p_t'beta`` over (unit, t) cells, skipping missing outcomes."""
    kept = [(u, t) for u, t in cells if np.isfinite(_outcome(dataset, u, t))]
    if not kept:
        raise PeriodOutOfRange(f"{label}: no observed post-treatment outcome")
    if len(kept) < len(cells):
        LOGGER.info("%s: %d of %d post-treatment outcomes missing", label, len(cells) - len(kept), len(cells))
    w = 1.0 / len(kept)
    rows = tuple(PostRow(u, t, w, predictor_row(dataset, design, u, t)) for u, t in kept)
    p = np.zeros(design.d)
    for r in rows:
        p += r.weight * r.row
    observed = float(np.mean([_outcome(dataset, u, t) for u, t in kept]))
    return PredictorVector(p, observed, label, rows, tuple(units), len(kept))


def build_predictor(spec: PredictandSpec, dataset: PanelDataset, design: DesignMatrices) -> PredictorVector:
    label = spec.label
    if spec.kind == "individual":
        u = spec.unit
        t = int(dataset.adoption[u]) + spec.k
        _check_period(dataset, t, label)
        return _combine(dataset, design, [(u, t)], label, (u,))
    if spec.kind == "unit_average":
        u = spec.unit
        Ti = int(dataset.adoption[u])
        _check_period(dataset, Ti, label)
        cells = [(u, t) for t in range(Ti, dataset.t_max + 1)]
        return _combine(dataset, design, cells, label, (u,))
    if spec.kind == "cohort_att":
        t = spec.s0 + spec.k
        _check_period(dataset, t, label)
        if spec.strategy == "aggregate_unit":
            if AVE_UNIT not in design.treated:
                raise InvalidConfig("aggregate_unit strategy needs the aggregated dataset")
            return _combine(dataset, design, [(AVE_UNIT, t)], label, (AVE_UNIT,))
        members = tuple(u for u in design.treated if dataset.adoption[u] == spec.s0)
        if not members:
            raise EmptyCohort(f"no treated unit adopts at {spec.s0}")
        return _combine(dataset, design, [(u, t) for u in members], label, members)
    units = design.treated
    cells = [(u, int(dataset.adoption[u]) + spec.k) for u in units]
    for _, t in cells:
        _check_period(dataset, t, label)
    return _combine(dataset, design, cells, label, units)


def aggregate_cohort(dataset: PanelDataset, s0: int) -> PanelDataset:
    """Replace the units adopting at ``s0`` by their mean pseudo-unit ``ave``."""
    members = [u for u in dataset.treated if dataset.adoption[u] == s0]
    if not members:
        raise EmptyCohort(f"no unit adopts at {s0}")
    idx = [dataset.unit_index(u) for u in members]
    block = dataset.cube[idx]
    counts = np.isfinite(block).sum(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ave = np.nanmean(block, axis=0)
    partial = (counts > 0) & (counts < len(members))
    if partial.any():
        LOGGER.warning("cohort %s: %d cells averaged over a subset of members", s0, int(partial.sum()))
    records = [r for r in dataset.records if r[0] not in members]
    for j, t in enumerate(dataset.times):
        for k, f in enumerate(dataset.features):
            if np.isfinite(ave[j, k]):
                records.append((AVE_UNIT, int(t), f, float(ave[j, k]), float(s0)))
    out = PanelDataset.from_records(records, dataset.features)
    if out.t_min != dataset.t_min or out.t_max != dataset.t_max:
        raise InvalidConfig("aggregation changed the time range")
    return out
