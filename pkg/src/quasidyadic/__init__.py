"""Dyadic cubes, random grids and Tb diagnostics on finite quasimetric point clouds."""

__version__ = "0.1.0"

from .errors import ValidationError, InfeasibleError, InternalError  # noqa: F401
