"""Exception taxonomy shared by all modules.

Validation-type errors map to CLI exit code 2, solver failures to exit code 3.
"""


class LamewaveError(Exception):
    """Base class for all package errors."""


class ValidationError(LamewaveError):
    """Bad input: shapes, parameters, config files, incompatible data."""


class GeometryError(ValidationError):
    """Invalid or degenerate geometry (e.g. structure touching the outer boundary)."""


class ResourceLimitError(ValidationError):
    """A configured size cap (vertices, dense-solver DOFs, ...) would be exceeded."""


class SolverError(LamewaveError):
    """Numerical failure: no convergence, singular factorization, ..."""

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = dict(detail or {})
