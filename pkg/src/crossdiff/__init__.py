"""Finite volume solver and a posteriori error estimators for a
volume-filling cross-diffusion ion transport model."""

from .mesh import Mesh, build_structured_mesh, load_mesh, validate_admissibility, vertex_interpolation_weights
from .fvsolver import ModelParams, BoundaryData, FVState, Trajectory

__all__ = [
    "Mesh",
    "build_structured_mesh",
    "load_mesh",
    "validate_admissibility",
    "vertex_interpolation_weights",
    "ModelParams",
    "BoundaryData",
    "FVState",
    "Trajectory",
]

__version__ = "0.1.0"
