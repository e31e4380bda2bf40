"""Exception hierarchy shared across the package."""
from __future__ import annotations


class ELError(Exception):
    """Base class for all errors raised by el_opeval."""


class ValidationError(ELError, ValueError):
    """Input data or configuration violates a documented invariant."""


class ConfigMismatch(ValidationError):
    pass


class NonPositiveLogArgument(ELError, ArithmeticError):
    """A dual iterate left the strict interior of the log domain."""


class MaxIterationsExceeded(ELError, RuntimeError):
    """The dual solver hit its iteration cap.

    ``best_value`` is the best objective reached; ``converged`` is always False.
    """

    def __init__(self, message: str, best_value: float = float("nan")):
        super().__init__(message)
        self.best_value = best_value
        self.converged = False


class SolverFailure(ELError, RuntimeError):
    pass


class WrongPolicyCount(ValidationError):
    pass


class InconsistentBoundaryAllocation(ELError, RuntimeError):
    pass


class ZeroWeightSum(ELError, ZeroDivisionError):
    pass


class AllCellsInfeasible(ELError, RuntimeError):
    pass


class EmptyConditioningEvent(ELError, ZeroDivisionError):
    pass


class UnsupportedDf(ValidationError):
    pass


class InsufficientArmData(ValidationError):
    def __init__(self, arm: int, count: int):
        super().__init__(f"arm {arm} appears {count} times in the log; at least 2 required")
        self.arm = arm
        self.count = count


class DegenerateDesign(ELError, RuntimeError):
    pass


class AllZeroUpperBounds(ELError, RuntimeWarning):
    pass


class CsvParseError(ValidationError):
    """A CSV cell could not be parsed; ``line`` and ``column`` are 1-based."""

    def __init__(self, message: str, line: int, column: int | None = None):
        where = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column
