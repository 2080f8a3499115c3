"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SeeSmpError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SeeSmpError, ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(SeeSmpError):
    """Incomplete or inconsistent problem data (missing callbacks, bad config)."""


class InsufficientDataError(SeeSmpError, ValueError):
    """Too few usable data points for a fit."""


class NumericalError(SeeSmpError, ArithmeticError):
    """A numerical procedure failed."""


class BlowupError(NumericalError):
    """Non-finite values appeared during time stepping."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class StepSizeError(NumericalError):
    """The implicit fixed point in a backward step cannot contract."""


class NonContractionError(NumericalError):
    """Picard iteration did not converge."""

    def __init__(self, message: str, ratio: float | None = None) -> None:
        super().__init__(message)
        self.ratio = ratio


class RankDeficiencyWarning(UserWarning):
    """Regression design was rank deficient; a minimum-norm solution was used."""


class DroppedDataWarning(UserWarning):
    """Non-positive values were removed before a log-log fit."""


class ParabolicityError(InvalidArgumentError):
    """The parabolicity inequality fails at ``point`` = (t, position)."""

    def __init__(self, message: str, point: tuple[float, float] | None = None) -> None:
        super().__init__(message)
        self.point = point
