"""Coupled solid-fluid wave tools: meshes, FEM operators, spectra, and the
symmetry tests that decide whether a structure shape supports trapped modes."""

from .errors import (
    GeometryError,
    LamewaveError,
    ResourceLimitError,
    SolverError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "GeometryError",
    "LamewaveError",
    "ResourceLimitError",
    "SolverError",
    "ValidationError",
    "__version__",
]
