"""Exception hierarchy shared by the library and the command line.

Each error class carries the exit code the CLI reports for it.
"""


class LatgasError(Exception):
    """Base class for failures raised by latgas computations."""

    exit_code: int = 2


class ValidationFailure(LatgasError):
    """A model input or invariant check did not pass (rates, tables, constraints)."""

    exit_code = 1


class NumericalError(LatgasError):
    """A root finder, quadrature, CG or eigensolver did not reach its tolerance."""

    exit_code = 2


class ResourceCapError(LatgasError):
    """An enumeration, sector or window size exceeds its configured cap."""

    exit_code = 3
