"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError and
subclasses exit 2, NumericalError and subclasses exit 3.
"""


class CmfError(Exception):
    """Base class for all package errors."""


class DataError(CmfError):
    """Invalid, inconsistent, or out-of-range input data."""


class ParseError(DataError):
    """Malformed text input. Carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class FormatError(DataError):
    """Corrupt or truncated binary file."""


class NumericalError(CmfError):
    """Numerical failure during factorization or solving."""


class SingularSystemError(NumericalError):
    """A normal-equation system was not positive definite."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class DivergenceError(NumericalError):
    """Training produced non-finite values."""
