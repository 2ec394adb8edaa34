"""Exception types shared across the package."""


class SieveStreamError(Exception):
    """Base class for all package errors."""


class InputError(SieveStreamError, ValueError):
    """A sample lacks a field the objective needs, or shapes disagree."""


class ValidationError(SieveStreamError, ValueError):
    """A value violates a documented invariant (negative score, bad softmax)."""


class NumericError(SieveStreamError, ArithmeticError):
    """Non-finite arithmetic or a determinant that cannot be trusted."""


class StaleStateError(SieveStreamError, RuntimeError):
    """A gain was computed against a state that has since changed."""


class DegenerateCandidateError(SieveStreamError, ValueError):
    """Commit refused: the candidate duplicates the current span exactly."""


class ConfigError(SieveStreamError, ValueError):
    """Invalid or inconsistent configuration."""


class RecordParseError(SieveStreamError, ValueError):
    """Malformed record file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BudgetError(SieveStreamError, ValueError):
    """Exhaustive search would exceed its combinatorial budget."""
