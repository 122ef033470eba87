"""Simulated staggered-adoption panels with known effects and coverage studies."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import PredictandSpec, StudyConfig
from .errors import InvalidConfig, StagsynthError
from .panel import PanelDataset
from .pipeline import run_many

LOGGER = logging.getLogger(__name__)

ERROR_LAWS = ("iid_gaussian", "ar1", "cointegrated")


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``N1`` treated units adopt at ``T0 + 1 + stagger * i``; each treated
    outcome is ``donors @ w0 + intercept + misspecification + u`` with ``u``
    drawn from ``error_law`` at scale ``sigma``, plus ``effect`` from
    adoption on.  Donors are level shifts plus unit-variance noise of the
    same law (for ``cointegrated`` a shared random-walk factor is added).
    """

    J: int = 10
    T0: int = 50
    T_post: int = 5
    N1: int = 3
    stagger: int = 5
    M: int = 1
    w0: tuple[float, ...] | None = None
    intercept: float = 0.0
    error_law: str = "iid_gaussian"
    sigma: float = 1.0
    phi: float = 0.0
    donor_sigma: float = 1.0
    misspecification: float = 0.0
    effect: float = 1.0
    R: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.error_law not in ERROR_LAWS:
            raise InvalidConfig(f"unknown error law {self.error_law!r}")
        if not abs(self.phi) < 1.0:
            raise InvalidConfig("|phi| must be below 1")
        if min(self.J, self.T0, self.T_post, self.N1, self.M, self.R) < 1:
            raise InvalidConfig("J, T0, T_post, N1, M and R must be positive")
        if self.sigma < 0 or self.donor_sigma <= 0 or self.stagger < 0:
            raise InvalidConfig("scales must be non-negative and donor_sigma positive")
        w = self.weights
        if w.size != self.J or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidConfig("w0 must be J simplex weights")

    @property
    def weights(self) -> np.ndarray:
        if self.w0 is None:
            return np.full(self.J, 1.0 / self.J)
        return np.asarray(self.w0, dtype=float)

    @property
    def adoption_times(self) -> list[int]:
        return [self.T0 + 1 + self.stagger * i for i in range(self.N1)]

    @property
    def T(self) -> int:
        return self.adoption_times[-1] + self.T_post - 1


@dataclass(frozen=True)
class Truth:
    """True effects: ``effect`` at every treated post-treatment cell."""

    effect: float
    adoption: dict

    def individual(self, unit: str, k: int) -> float:
        return self.effect

    def value(self, spec: PredictandSpec) -> float:
        # the injected effect is constant, so every predictand equals it
        return self.effect


def _series(rng: np.random.Generator, law: str, n: int, T: int, sigma: float, phi: float) -> np.ndarray:
    eps = rng.standard_normal((n, T)) * sigma
    if law == "ar1" and phi != 0.0:
        out = np.empty_like(eps)
        out[:, 0] = eps[:, 0] / math.sqrt(1.0 - phi**2)
        for t in range(1, T):
            out[:, t] = phi * out[:, t - 1] + eps[:, t]
        return out
    return eps


def generate(spec: DgpSpec, rep: int) -> tuple[PanelDataset, Truth]:
    """Panel for replication ``rep``; deterministic in ``(spec.seed, rep)``."""
    rng = np.random.default_rng([spec.seed, rep])
    T, J, M = spec.T, spec.J, spec.M
    features = ["y"] + [f"x{m}" for m in range(1, M)]
    levels = rng.normal(0.0, 3.0, size=(J, M))
    donors = levels[:, None, :] + np.stack(
        [_series(rng, spec.error_law, J, T, spec.donor_sigma, spec.phi) for _ in range(M)], axis=-1)
    if spec.error_law == "cointegrated":
        factor = rng.standard_normal((T, M)).cumsum(axis=0)
        loadings = rng.uniform(0.5, 1.5, size=(J, 1, M))
        donors = donors + loadings * factor[None]
    w = spec.weights
    records = []
    for j in range(J):
        for t in range(T):
            for m, f in enumerate(features):
                records.append((f"d{j:02d}", t + 1, f, float(donors[j, t, m]), math.inf))
    adoption = {}
    for i, Ti in enumerate(spec.adoption_times):
        unit = f"t{i:02d}"
        adoption[unit] = Ti
        u = np.stack([_series(rng, spec.error_law, 1, T, spec.sigma, spec.phi)[0] for _ in range(M)], axis=-1)
        base = np.einsum("j,jtm->tm", w, donors) + spec.intercept + spec.misspecification + u
        for t in range(T):
            treated = t + 1 >= Ti
            for m, f in enumerate(features):
                v = base[t, m] + (spec.effect if treated and m == 0 else 0.0)
                records.append((unit, t + 1, f, float(v), float(Ti)))
    return PanelDataset.from_records(records, tuple(features)), Truth(spec.effect, adoption)


@dataclass
class CoverageReport:
    coverage: dict[str, float]
    mean_width: dict[str, float]
    failure_rate: float
    reps: int
    nominal: float
    failures: dict[str, int] = field(default_factory=dict)
    widths: dict[str, list[float]] = field(default_factory=dict, repr=False)
    hits: dict[str, list[bool]] = field(default_factory=dict, repr=False)

    @property
    def overall(self) -> float:
        all_hits = [h for v in self.hits.values() for h in v]
        return float(np.mean(all_hits)) if all_hits else math.nan

    def to_dict(self) -> dict:
        return {"schema_version": 1, "reps": self.reps, "nominal": self.nominal,
                "coverage": self.coverage, "overall_coverage": self.overall,
                "mean_width": self.mean_width, "failure_rate": self.failure_rate, "failures": self.failures}


def default_predictands(spec: DgpSpec) -> list[PredictandSpec]:
    return [PredictandSpec("individual", unit=f"t{i:02d}", k=0) for i in range(spec.N1)]


def rep_seed(base: int, rep: int) -> int:
    """Draw seed for a replication, independent of the batch layout."""
    return int(np.random.SeedSequence([base, rep]).generate_state(2, np.uint64)[0])


def coverage_study(spec: DgpSpec, config: StudyConfig, predictands: Sequence[PredictandSpec] | None = None,
                   chunk: int = 20) -> CoverageReport:
    """Run the full pipeline on ``spec.R`` replications.

    Bound programs of ``chunk`` replications are solved as one batch; the
    result depends on ``chunk`` only through rounding.  A replication whose pipeline raises
    counts as a failure and is excluded from coverage.
    """
    preds = list(predictands) if predictands is not None else default_predictands(spec)
    labels = [p.label for p in preds]
    hits = {lab: [] for lab in labels}
    widths = {lab: [] for lab in labels}
    fails = {lab: 0 for lab in labels}
    for start in range(0, spec.R, chunk):
        jobs, meta = [], []
        for rep in range(start, min(start + chunk, spec.R)):
            ds, truth = generate(spec, rep)
            for p in preds:
                cfg = replace(config, predictand=p, seed=rep_seed(config.seed, rep))
                jobs.append((ds, cfg))
                meta.append((p.label, truth.value(p)))
        for (label, true), result in zip(meta, _run_guarded(jobs)):
            if result is None:
                fails[label] += 1
                continue
            iv = result.intervals[0]
            hits[label].append(iv.contains(true))
            widths[label].append(iv.width)
        LOGGER.info("coverage study: %d of %d replications done", min(start + chunk, spec.R), spec.R)
    total = sum(len(v) for v in hits.values()) + sum(fails.values())
    return CoverageReport(
        coverage={k: float(np.mean(v)) if v else math.nan for k, v in hits.items()},
        mean_width={k: float(np.mean(v)) if v else math.nan for k, v in widths.items()},
        failure_rate=sum(fails.values()) / total if total else 0.0,
        reps=spec.R, nominal=1.0 - config.alpha1 - config.alpha2,
        failures=fails, widths=widths, hits=hits,
    )


def _run_guarded(jobs):
    try:
        return run_many(jobs)
    except StagsynthError:
        # isolate the failing job(s) by running one at a time
        out = []
        for job in jobs:
            try:
                out.append(run_many([job])[0])
            except StagsynthError as exc:
                LOGGER.warning("replication failed: %s", exc)
                out.append(None)
        return out


def write_panel(dataset: PanelDataset, path) -> None:
    """Write ``dataset`` as the wide CSV read by ``load_panel``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "time", "adoption_time", *dataset.features])
        for u in dataset.units:
            a = dataset.adoption[u]
            for t in dataset.times:
                vals = [dataset.cube[dataset.unit_index(u), dataset.time_index(int(t)), k]
                        for k in range(len(dataset.features))]
                writer.writerow([u, int(t), "" if math.isinf(a) else int(a),
                                 *("" if not np.isfinite(v) else repr(float(v)) for v in vals)])
