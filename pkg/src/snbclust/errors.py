"""Exception hierarchy.

Each family maps to a distinct CLI exit code.
"""


class SnbClustError(Exception):
    exit_code = 1


class ParseError(SnbClustError):
    """Malformed or missing input file."""

    exit_code = 2


class ValidationError(SnbClustError, ValueError):
    """Input that parses but violates a precondition."""

    exit_code = 3


class EmptyResultError(ValidationError):
    pass


class NumericError(SnbClustError, ArithmeticError):
    """Numerical failure inside a fit (degenerate clusters, non-finite values)."""

    exit_code = 4


class DegenerateFitError(NumericError):
    pass
