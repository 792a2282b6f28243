"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument/domain violations; the
classes here mark failures a caller may want to catch and route differently
(parse diagnostics, numerical identification breakdowns, exhausted budgets).
"""


class MenumixError(Exception):
    """Base class for package-specific failures."""


class ParseError(MenumixError, ValueError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IdentificationError(MenumixError, RuntimeError):
    """The identification construction cannot proceed on the given input."""


class IllConditionedError(IdentificationError):
    """Numerical conditioning too poor to trust the recovery."""


class EstimationError(MenumixError, RuntimeError):
    """An estimation step produced a degenerate or unusable result."""


class BudgetExceededError(MenumixError, RuntimeError):
    """A combinatorial search would exceed its configured budget."""
