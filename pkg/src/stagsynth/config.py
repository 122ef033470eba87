"""Plain configuration records shared by every stage of the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidAlphas, InvalidConfig, UnsupportedFamily

PREDICTAND_KINDS = ("individual", "unit_average", "cohort_att", "att")
COHORT_STRATEGIES = ("per_unit_weights", "aggregate_unit")
FAMILIES = ("simplex", "lasso", "ridge", "l1l2", "ols")
OOS_METHODS = ("subgaussian", "location_scale", "quantile_reg")
SIM_METHODS = ("max_ineq", "bonferroni", "scheffe")


@dataclass(frozen=True)
class PredictandSpec:
    """Which treatment effect to predict.

    ``individual`` needs ``unit`` and ``k``; ``unit_average`` needs ``unit``;
    ``cohort_att`` needs ``s0`` and ``k``; ``att`` needs ``k``.
    """

    kind: str
    unit: str | None = None
    k: int = 0
    s0: int | None = None
    strategy: str = "per_unit_weights"

    def __post_init__(self):
        if self.kind not in PREDICTAND_KINDS:
            raise InvalidConfig(f"unknown predictand kind {self.kind!r}")
        if self.k < 0:
            raise InvalidConfig("k must be non-negative")
        if self.kind in ("individual", "unit_average") and self.unit is None:
            raise InvalidConfig(f"{self.kind} predictand needs a treated unit")
        if self.kind == "cohort_att":
            if self.s0 is None:
                raise InvalidConfig("cohort_att predictand needs s0")
            if self.strategy not in COHORT_STRATEGIES:
                raise InvalidConfig(f"unknown cohort strategy {self.strategy!r}")

    @property
    def label(self) -> str:
        if self.kind == "individual":
            return f"tau[{self.unit},{self.k}]"
        if self.kind == "unit_average":
            return f"tau[{self.unit},.]"
        if self.kind == "cohort_att":
            return f"tau[.,{self.k};{self.s0}]"
        return f"tau[.,{self.k}]"


@dataclass(frozen=True)
class ConstraintSpec:
    """Weight constraint family, shared by every treated unit.

    ``Q1`` is the simplex / lasso budget and ``Q2`` the ridge radius.
    """

    family: str = "simplex"
    Q1: float = 1.0
    Q2: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedFamily(f"unknown constraint family {self.family!r}")
        if self.Q1 <= 0:
            raise InvalidConfig("Q1 must be positive")
        if self.family in ("ridge", "l1l2"):
            if self.Q2 is None or self.Q2 <= 0:
                raise InvalidConfig(f"{self.family} needs a positive Q2")

    def check_dims(self, J: int) -> None:
        if self.family == "l1l2" and self.Q2 < self.Q1 / math.sqrt(J) - 1e-12:
            raise InvalidConfig(f"l1l2 feasible set is empty: Q2 < Q1/sqrt(J) with J={J}")


@dataclass(frozen=True)
class CovariateSpec:
    """Covariate adjustment columns of C.

    ``constant`` and ``trend`` list the features that get their own intercept
    or linear trend; ``common_constant`` adds one intercept shared by all
    features of a treated unit.
    """

    constant: tuple[str, ...] = ()
    trend: tuple[str, ...] = ()
    common_constant: bool = False


@dataclass(frozen=True)
class StudyConfig:
    predictand: PredictandSpec
    features: tuple[str, ...] | None = None
    covariates: CovariateSpec = field(default_factory=CovariateSpec)
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    fit_mode: str = "separate"
    anticipation: int = 0
    alpha1: float = 0.05
    alpha2: float = 0.05
    draws: int = 200
    oos_method: str = "subgaussian"
    seed: int = 0
    cointegrated: bool = False
    treated_units: tuple[str, ...] | None = None
    standardize_features: bool = False
    rho_constant: str = "C1"
    cov_method: str = "HC1"
    newey_west: bool = False
    u_missp: bool = True
    u_lags: int = 1
    e_regressors: str = "donors"
    sigma_average: str = "mean"
    horizon: int | None = None
    simultaneous: bool = False
    sim_method: str = "max_ineq"
    delta_cap: float | None = None
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            a = getattr(self, name)
            if not 0.0 < a < 1.0:
                raise InvalidAlphas(f"{name}={a} must lie in (0, 1)")
        if self.alpha1 + self.alpha2 >= 1.0:
            raise InvalidAlphas(f"alpha1 + alpha2 = {self.alpha1 + self.alpha2} must be < 1")
        if self.draws < 1:
            raise InvalidConfig("draws must be at least 1")
        if self.anticipation < 0:
            raise InvalidConfig("anticipation must be non-negative")
        if self.fit_mode not in ("separate", "pooled"):
            raise InvalidConfig(f"unknown fit_mode {self.fit_mode!r}")
        if self.oos_method not in OOS_METHODS:
            raise InvalidConfig(f"unknown oos_method {self.oos_method!r}")
        if self.sim_method not in SIM_METHODS:
            raise InvalidConfig(f"unknown sim_method {self.sim_method!r}")
        if self.rho_constant not in ("C1", "C2", "C3"):
            raise InvalidConfig(f"unknown rho_constant {self.rho_constant!r}")
        if self.cov_method not in ("HC0", "HC1", "HC2", "HC3"):
            raise InvalidConfig(f"unknown cov_method {self.cov_method!r}")
        if self.e_regressors not in ("donors", "constant"):
            raise InvalidConfig(f"unknown e_regressors {self.e_regressors!r}")
        if self.sigma_average not in ("mean", "independent"):
            raise InvalidConfig(f"unknown sigma_average {self.sigma_average!r}")
        if self.horizon is not None and self.horizon < 0:
            raise InvalidConfig("horizon must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.delta_cap is not None and self.delta_cap <= 0:
            raise InvalidConfig("delta_cap must be positive")
