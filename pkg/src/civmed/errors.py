"""Exception hierarchy.

Errors split into two families so the command line can map them onto exit
codes: problems with the user's input (exit 1) and numerical failures of an
estimator (exit 2).
"""

from __future__ import annotations


class CivmedError(Exception):
    """Base class for all package errors.

    ``stage`` names the pipeline step that failed, when known.
    """

    exit_code = 1

    def __init__(self, message: str = "", *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""


class UserInputError(CivmedError, ValueError):
    """Bad data, bad configuration, or an unsupported request."""

    exit_code = 1


class NumericalError(CivmedError, ArithmeticError):
    """An estimator could not produce a trustworthy answer."""

    exit_code = 2


class SchemaError(UserInputError):
    """A referenced column is missing or roles overlap."""


class ParseError(UserInputError):
    """A CSV cell could not be read as a finite real number."""


class DomainError(UserInputError):
    """A value lies outside the domain of a transformation."""


class CompositionError(UserInputError):
    """Models, parameter blocks or moderator codings do not fit together."""


class PreconditionError(UserInputError):
    """An operation was called with arguments violating its precondition."""


class UnderdeterminedError(UserInputError):
    """A basis has at least as many columns as there are rows."""


class RankError(NumericalError):
    """A linear system is singular or too ill-conditioned to solve."""

    def __init__(self, message: str = "", *, condition_number: float | None = None,
                 stage: str | None = None):
        super().__init__(message, stage=stage)
        self.condition_number = condition_number


class NegativeVarianceError(NumericalError):
    """A negative measurement-error variance reached a correction."""


class DegenerateColumnError(RankError):
    """A non-intercept design column is constant."""


class ConvergenceError(NumericalError):
    """Newton iterations did not reach the tolerance."""

    def __init__(self, message: str = "", *, last_iterate=None, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.last_iterate = last_iterate


class IdentificationError(NumericalError):
    """The data carry no information about the target parameter."""


class ConditioningError(NumericalError):
    """Too many rows hit a numerical floor."""


class InstabilityError(NumericalError):
    """Too many bootstrap resamples failed."""


class BoundaryWarning(UserWarning):
    """An estimate sits at or beyond the edge of its parameter space."""


class DroppedRowsWarning(UserWarning):
    """Rows were removed while loading data."""


class WeakInstrumentWarning(UserWarning):
    """A first-stage F statistic fell below the weak-instrument threshold."""
