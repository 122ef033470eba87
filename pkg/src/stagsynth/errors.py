"""Exception hierarchy.

Every error carries a stable ``code`` (its class name) so the command line
can print machine-readable records and map families to exit codes.
"""

from __future__ import annotations


class StagsynthError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigError(StagsynthError):
    exit_code = 2


class DataError(StagsynthError):
    exit_code = 3


class NumericalError(StagsynthError):
    exit_code = 4


# configuration
class InvalidAlphas(ConfigError):
    pass


class InvalidConfig(ConfigError):
    pass


class UnsupportedFamily(ConfigError):
    pass


class MissingJointCovariance(ConfigError):
    pass


# data
class NonAbsorbingTreatment(DataError):
    pass


class DuplicateCell(DataError):
    pass


class NoNeverTreatedUnit(DataError):
    pass


class NonNumericValue(DataError):
    pass


class EmptyDonorPool(DataError):
    pass


class InsufficientPretreatment(DataError):
    pass


class AllRowsDropped(DataError):
    pass


class MissingDonorOutcome(DataError):
    pass


class PeriodOutOfRange(DataError):
    pass


class EmptyCohort(DataError):
    pass


class TooFewResiduals(DataError):
    pass


class DegenerateScale(DataError):
    pass


# numerics
class NumericalFailure(NumericalError):
    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution


class TooManyFailures(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class RankDeficientRegressors(NumericalError):
    pass
