"""Exception hierarchy shared by every subsystem.

The CLI maps each family onto a process exit code, so library code raises the
most specific class available instead of a bare ``ValueError``.
"""


class AmbientFlowError(Exception):
    exit_code = 1


class ConfigError(AmbientFlowError, ValueError):
    """Invalid configuration, shape mismatch, or bad argument."""

    exit_code = 2


class UsageError(AmbientFlowError, ValueError):
    """API misuse (e.g. backward on a non-scalar, empty logavgexp)."""

    exit_code = 2


class NumericError(AmbientFlowError, ArithmeticError):
    """A non-finite value surfaced in a computation."""

    exit_code = 3


class DivergenceError(NumericError):
    """Training loss became non-finite; the last good checkpoint was kept."""


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of a formula."""


class BudgetError(AmbientFlowError, ValueError):
    """Exhaustive enumeration would exceed its configured budget."""

    exit_code = 2


class IngestError(AmbientFlowError, OSError):
    """Malformed or missing input file."""

    exit_code = 4
