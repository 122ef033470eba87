"""Panel ingestion, donor pools and the stacked pre-treatment design."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import CovariateSpec, PredictandSpec, StudyConfig
from .errors import (
    AllRowsDropped,
    DuplicateCell,
    EmptyCohort,
    EmptyDonorPool,
    InsufficientPretreatment,
    InvalidConfig,
    NoNeverTreatedUnit,
    NonAbsorbingTreatment,
    NonNumericValue,
    PeriodOutOfRange,
)

LOGGER = logging.getLogger(__name__)

INF = math.inf


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced cube of unit x period x feature values (NaN = missing).

    Units are ordered with eventually treated units first (by adoption time,
    then id) followed by never-treated units (by id).  The first feature is
    the outcome.
    """

    units: tuple[str, ...]
    times: np.ndarray
    features: tuple[str, ...]
    cube: np.ndarray
    adoption: Mapping[str, float]

    def __post_init__(self):
        if self.cube.shape != (len(self.units), len(self.times), len(self.features)):
            raise ValueError("cube shape does not match labels")
        if len(set(self.units)) != len(self.units):
            raise DuplicateCell("duplicate unit labels")
        if not any(math.isinf(self.adoption[u]) for u in self.units):
            raise NoNeverTreatedUnit("at least one unit must never be treated")
        adopt = [self.adoption[u] for u in self.units]
        if adopt != sorted(adopt):
            raise ValueError("units must be ordered by adoption time")
        self.cube.setflags(write=False)
        self.times.setflags(write=False)
        object.__setattr__(self, "_uidx", {u: i for i, u in enumerate(self.units)})
        object.__setattr__(self, "_fidx", {f: i for i, f in enumerate(self.features)})

    @classmethod
    def from_records(
        cls,
        records: Iterable[tuple[str, int, str, float, float]],
        features: Sequence[str] | None = None,
    ) -> "PanelDataset":
        """Build from ``(unit, time, feature, value, adoption_time)`` tuples."""
        recs = list(records)
        adoption: dict[str, float] = {}
        feats: list[str] = list(features) if features is not None else []
        seen = set()
        for unit, t, feat, _, adopt in recs:
            a = float(adopt)
            if unit in adoption and adoption[unit] != a:
                raise NonAbsorbingTreatment(f"unit {unit!r} has more than one adoption time")
            adoption[unit] = a
            if features is None and feat not in seen:
                feats.append(feat)
            seen.add(feat)
        if not recs:
            raise NoNeverTreatedUnit("empty panel")
        times = np.arange(min(r[1] for r in recs), max(r[1] for r in recs) + 1)
        units = order_units(adoption)
        uidx = {u: i for i, u in enumerate(units)}
        fidx = {f: i for i, f in enumerate(feats)}
        cube = np.full((len(units), len(times), len(feats)), np.nan)
        filled = np.zeros(cube.shape, dtype=bool)
        t0 = int(times[0])
        for unit, t, feat, value, _ in recs:
            if feat not in fidx:
                continue
            key = (uidx[unit], int(t) - t0, fidx[feat])
            if filled[key]:
                raise DuplicateCell(f"duplicate cell ({unit!r}, {t}, {feat!r})")
            filled[key] = True
            cube[key] = float(value) if value is not None else np.nan
        return cls(tuple(units), times, tuple(feats), cube, dict(adoption))

    # lookups
    def unit_index(self, unit: str) -> int:
        try:
            return self._uidx[unit]
        except KeyError:
            raise InvalidConfig(f"unknown unit {unit!r}") from None

    def feature_index(self, feature: str) -> int:
        try:
            return self._fidx[feature]
        except KeyError:
            raise InvalidConfig(f"unknown feature {feature!r}") from None

    def time_index(self, t: int) -> int:
        if not self.t_min <= t <= self.t_max:
            raise PeriodOutOfRange(f"period {t} outside [{self.t_min}, {self.t_max}]")
        return int(t) - self.t_min

    def value(self, unit: str, t: int, feature: str | None = None) -> float:
        f = 0 if feature is None else self.feature_index(feature)
        return float(self.cube[self.unit_index(unit), self.time_index(t), f])

    def series(self, unit: str, feature: str | None = None) -> np.ndarray:
        f = 0 if feature is None else self.feature_index(feature)
        return self.cube[self.unit_index(unit), :, f]

    @property
    def outcome(self) -> str:
        return self.features[0]

    @property
    def t_min(self) -> int:
        return int(self.times[0])

    @property
    def t_max(self) -> int:
        return int(self.times[-1])

    @property
    def treated(self) -> tuple[str, ...]:
        return tuple(u for u in self.units if not math.isinf(self.adoption[u]))

    @property
    def never_treated(self) -> tuple[str, ...]:
        return tuple(u for u in self.units if math.isinf(self.adoption[u]))

    @property
    def records(self) -> list[tuple[str, int, str, float, float]]:
        out = []
        for i, u in enumerate(self.units):
            for j, t in enumerate(self.times):
                for k, f in enumerate(self.features):
                    v = self.cube[i, j, k]
                    if np.isfinite(v):
                        out.append((u, int(t), f, float(v), self.adoption[u]))
        return out


def order_units(adoption: Mapping[str, float]) -> list[str]:
    return sorted(adoption, key=lambda u: (adoption[u], u))


def _parse_number(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise NonNumericValue(f"non-numeric {what}: {text!r}") from None


def _parse_int(text: str, what: str) -> int:
    v = _parse_number(text, what)
    if not float(v).is_integer():
        raise NonNumericValue(f"non-integer {what}: {text!r}")
    return int(v)


def load_panel(path: str | Path, schema: Mapping[str, object] | None = None) -> PanelDataset:
    """Read a wide CSV (one row per unit-period, one column per feature).

    ``schema`` may rename the ``unit``, ``time``, ``treatment`` and
    ``adoption_time`` columns and must list ``features`` (outcome first)
    unless every non-reserved column is a feature.
    """
    schema = dict(schema or {})
    ucol = str(schema.get("unit", "unit"))
    tcol = str(schema.get("time", "time"))
    trcol = schema.get("treatment")
    adcol = schema.get("adoption_time")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if trcol is None and adcol is None:
        if "adoption_time" in header:
            adcol = "adoption_time"
        elif "treatment" in header:
            trcol = "treatment"
        else:
            raise InvalidConfig("CSV needs a treatment or adoption_time column")
    reserved = {ucol, tcol, trcol, adcol}
    features = schema.get("features")
    if features is None:
        features = [h for h in header if h not in reserved]
    features = [str(f) for f in features]  # type: ignore[union-attr]
    for col in [ucol, tcol, *features, trcol or adcol]:
        if col not in header:
            raise InvalidConfig(f"column {col!r} missing from {path}")

    seen: set[tuple[str, int]] = set()
    cells: list[tuple[str, int, str, float]] = []
    status: dict[str, list[tuple[int, str]]] = {}
    for row in rows:
        unit = row[ucol].strip()
        t = _parse_int(row[tcol].strip(), "time")
        if (unit, t) in seen:
            raise DuplicateCell(f"duplicate row for ({unit!r}, {t})")
        seen.add((unit, t))
        status.setdefault(unit, []).append((t, (row[trcol] if trcol else row[adcol]).strip()))
        for f in features:
            text = row[f].strip()
            cells.append((unit, t, f, np.nan if text == "" else _parse_number(text, f"value of {f}")))

    adoption: dict[str, float] = {}
    for unit, seq in status.items():
        seq.sort()
        if trcol:
            flags = []
            for t, text in seq:
                v = _parse_number(text, "treatment")
                if v not in (0.0, 1.0):
                    raise NonNumericValue(f"treatment must be 0/1, got {text!r}")
                flags.append((t, int(v)))
            first = next((t for t, v in flags if v == 1), None)
            if first is not None and any(v == 0 for t, v in flags if t > first):
                raise NonAbsorbingTreatment(f"treatment of unit {unit!r} switches off")
            adoption[unit] = INF if first is None else float(first)
        else:
            vals = {INF if text == "" else float(_parse_int(text, "adoption_time")) for _, text in seq}
            if len(vals) != 1:
                raise NonAbsorbingTreatment(f"unit {unit!r} has more than one adoption time")
            adoption[unit] = vals.pop()
    return PanelDataset.from_records(((u, t, f, v, adoption[u]) for u, t, f, v in cells), features)


def treated_set(dataset: PanelDataset, predictand: PredictandSpec,
                explicit: Sequence[str] | None = None) -> tuple[str, ...]:
    """Treated units entering the design: explicit list or the predictand's own units."""
    if explicit is not None:
        units = list(explicit)
        for u in units:
            dataset.unit_index(u)
            if math.isinf(dataset.adoption[u]):
                raise InvalidConfig(f"unit {u!r} is never treated")
        if predictand.unit is not None and predictand.unit not in units:
            raise InvalidConfig(f"predictand unit {predictand.unit!r} not among treated_units")
        return tuple(sorted(units, key=lambda u: (dataset.adoption[u], u)))
    kind = predictand.kind
    if kind in ("individual", "unit_average"):
        dataset.unit_index(predictand.unit)
        if math.isinf(dataset.adoption[predictand.unit]):
            raise InvalidConfig(f"unit {predictand.unit!r} is never treated")
        return (predictand.unit,)
    if kind == "cohort_att":
        members = tuple(u for u in dataset.treated if dataset.adoption[u] == predictand.s0)
        if not members:
            raise EmptyCohort(f"no unit adopts at {predictand.s0}")
        return members
    units = dataset.treated
    last = max(dataset.adoption[u] for u in units)
    if last + predictand.k > dataset.t_max:
        raise PeriodOutOfRange(
            f"att(k={predictand.k}) needs T_N1 + k <= T ({int(last)} + {predictand.k} > {dataset.t_max})"
        )
    return units


def resolve_donor_pool(dataset: PanelDataset, predictand: PredictandSpec,
                       units: Sequence[str] | None = None) -> dict[str, tuple[str, ...]]:
    """Donor pool for every treated unit of the design, ordered by unit id."""
    units = treated_set(dataset, predictand) if units is None else tuple(units)
    pools: dict[str, tuple[str, ...]] = {}
    for u in units:
        Ti = dataset.adoption[u]
        if predictand.kind == "individual":
            cutoff = Ti + predictand.k
        elif predictand.kind == "cohort_att":
            cutoff = predictand.s0 + predictand.k
        else:
            cutoff = INF
        if math.isinf(cutoff):
            pool = [j for j in dataset.units if math.isinf(dataset.adoption[j])]
        else:
            pool = [j for j in dataset.units if dataset.adoption[j] > cutoff]
        pool = sorted(j for j in pool if j != u)
        if not pool:
            raise EmptyDonorPool(f"no eligible donors for unit {u!r} under {predictand.label}")
        pools[u] = tuple(pool)
    return pools


def build_weighting_matrix(fit_mode: str, T0: int, M: int, N1: int) -> np.ndarray:
    if fit_mode == "separate":
        return np.eye(T0 * M * N1)
    if fit_mode == "pooled":
        return np.kron(np.ones((N1, N1)) / N1**2, np.eye(T0 * M))
    raise InvalidConfig(f"unknown fit_mode {fit_mode!r}")


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Stacked pre-treatment system ``A ~ B w + C r`` with bookkeeping.

    Columns of ``Z = [B, C]`` are ordered unit by unit inside each block, so
    ``beta = (w, r)``.  ``w_cols[u]`` and ``r_cols[u]`` index unit ``u``'s
    coefficients in ``beta``; ``r_labels[u]`` names its covariate columns as
    ``("common",)``, ``("constant", feature)`` or ``("trend", feature)``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    V: np.ndarray
    rows: tuple[tuple[str, str, int], ...]
    treated: tuple[str, ...]
    features: tuple[str, ...]
    donor_pools: Mapping[str, tuple[str, ...]]
    w_cols: Mapping[str, np.ndarray]
    r_cols: Mapping[str, np.ndarray]
    r_labels: Mapping[str, tuple[tuple, ...]]
    T0_per_unit: Mapping[str, int]
    windows: Mapping[str, np.ndarray]
    dropped: tuple[tuple[str, str, int], ...] = ()
    scales: Mapping[tuple[str, str], float] = field(default_factory=dict)
    fit_mode: str = "separate"

    @property
    def Z(self) -> np.ndarray:
        return np.hstack([self.B, self.C])

    @property
    def d(self) -> int:
        return self.B.shape[1] + self.C.shape[1]

    @property
    def J_total(self) -> int:
        return self.B.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def unit_rows(self, unit: str, feature: str | None = None) -> np.ndarray:
        return np.array([r for r, (u, f, _) in enumerate(self.rows)
                         if u == unit and (feature is None or f == feature)], dtype=int)

    def unit_cols(self, unit: str) -> np.ndarray:
        return np.concatenate([self.w_cols[unit], self.r_cols[unit]])


def _covariate_labels(features: Sequence[str], cov: CovariateSpec) -> list[tuple]:
    labels: list[tuple] = []
    if cov.common_constant:
        labels.append(("common",))
    for f in features:
        if f in cov.constant:
            labels.append(("constant", f))
        if f in cov.trend:
            labels.append(("trend", f))
    return labels


def covariate_value(label: tuple, feature: str, t: int) -> float:
    """Entry of a C row (feature, t) in the column named by ``label``."""
    if label[0] == "common":
        return 1.0
    if label[1] != feature:
        return 0.0
    return 1.0 if label[0] == "constant" else float(t)


def build_design(dataset: PanelDataset, config: StudyConfig) -> DesignMatrices:
    features = tuple(config.features) if config.features else dataset.features
    if features[0] != dataset.outcome:
        raise InvalidConfig(f"first feature must be the outcome {dataset.outcome!r}")
    for f in features:
        dataset.feature_index(f)
    cov = config.covariates
    for f in (*cov.constant, *cov.trend):
        if f not in features:
            raise InvalidConfig(f"covariate adjustment names unknown feature {f!r}")
    units = treated_set(dataset, config.predictand, config.treated_units)
    pools = resolve_donor_pool(dataset, config.predictand, units)
    labels = _covariate_labels(features, cov)

    a_parts, b_blocks, c_blocks, rows, dropped = [], [], [], [], []
    windows, T0s, scales = {}, {}, {}
    for u in units:
        Ti = dataset.adoption[u]
        end = int(Ti) - 1 - config.anticipation
        window = np.arange(dataset.t_min, end + 1)
        if window.size == 0:
            raise InsufficientPretreatment(f"unit {u!r} has no pre-treatment periods")
        windows[u], T0s[u] = window, int(window.size)
        ui = dataset.unit_index(u)
        donors_idx = [dataset.unit_index(j) for j in pools[u]]
        a_u, b_u, c_u = [], [], []
        for f in features:
            fi = dataset.feature_index(f)
            ti = window - dataset.t_min
            a = dataset.cube[ui, ti, fi]
            b = dataset.cube[np.ix_(donors_idx, ti, [fi])][:, :, 0].T
            keep = np.isfinite(a) & np.all(np.isfinite(b), axis=1)
            for t in window[~keep]:
                dropped.append((u, f, int(t)))
            scale = 1.0
            if config.standardize_features and keep.sum() > 1:
                sd = float(np.std(a[keep], ddof=1))
                scale = sd if sd > 0 else 1.0
            scales[(u, f)] = scale
            a_u.append(a[keep] / scale)
            b_u.append(b[keep] / scale)
            c_u.append(np.array([[covariate_value(lab, f, t) for lab in labels] for t in window[keep]])
                       .reshape(int(keep.sum()), len(labels)))
            rows.extend((u, f, int(t)) for t in window[keep])
        if sum(len(x) for x in a_u) == 0:
            raise AllRowsDropped(f"every pre-treatment row of unit {u!r} has missing values")
        a_parts.append(np.concatenate(a_u))
        b_blocks.append(np.vstack(b_u))  # w is shared across a unit's features
        c_blocks.append(np.vstack(c_u))
    if dropped:
        LOGGER.info("dropped %d pre-treatment rows with missing values", len(dropped))

    A = np.concatenate(a_parts)
    B = _block_diag(b_blocks)
    C = _block_diag(c_blocks) if labels else np.zeros((A.size, 0))
    n_w = [blk.shape[1] for blk in b_blocks]
    w_cols, r_cols, r_labels = {}, {}, {}
    off_w = 0
    off_r = B.shape[1]
    for u, nw in zip(units, n_w):
        w_cols[u] = np.arange(off_w, off_w + nw)
        r_cols[u] = np.arange(off_r, off_r + len(labels))
        r_labels[u] = tuple(labels)
        off_w += nw
        off_r += len(labels)
    rows_t = tuple(rows)
    V = weighting_matrix(rows_t, config.fit_mode, len(units))
    return DesignMatrices(
        A=A, B=B, C=C, V=V, rows=rows_t, treated=units, features=features,
        donor_pools=pools, w_cols=w_cols, r_cols=r_cols, r_labels=r_labels,
        T0_per_unit=T0s, windows=windows, dropped=tuple(dropped), scales=scales,
        fit_mode=config.fit_mode,
    )


def weighting_matrix(rows: Sequence[tuple[str, str, int]], fit_mode: str, n_units: int) -> np.ndarray:
    """V for arbitrary (possibly unbalanced) stacked rows.

    Pooled mode pairs rows sharing (feature, period) across treated units; on
    a balanced design this equals ``build_weighting_matrix``.
    """
    n = len(rows)
    if fit_mode == "separate":
        return np.eye(n)
    if fit_mode != "pooled":
        raise InvalidConfig(f"unknown fit_mode {fit_mode!r}")
    key = [(f, t) for _, f, t in rows]
    V = np.zeros((n, n))
    groups: dict[tuple, list[int]] = {}
    for r, k in enumerate(key):
        groups.setdefault(k, []).append(r)
    for members in groups.values():
        V[np.ix_(members, members)] = 1.0 / n_units**2
    return V


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    m = sum(b.shape[1] for b in blocks)
    out = np.zeros((n, m))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out
