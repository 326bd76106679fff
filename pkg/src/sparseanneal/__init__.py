"""Exact-k sparse linear regression by deterministic annealing."""

from sparseanneal.core import (
    EPS_CLIP,
    ConfigError,
    ConstraintInfeasibleError,
    DataIntegrityError,
    DomainError,
    Problem,
    RelaxedState,
    ShapeError,
    SolverError,
    SparseSolution,
    entropy,
    entropy_gradient,
    free_energy,
    free_energy_gradients,
    relaxed_cost,
    relaxed_cost_gradients,
    xi_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "EPS_CLIP",
    "ConfigError",
    "ConstraintInfeasibleError",
    "DataIntegrityError",
    "DomainError",
    "Problem",
    "RelaxedState",
    "ShapeError",
    "SolverError",
    "SparseSolution",
    "entropy",
    "entropy_gradient",
    "free_energy",
    "free_energy_gradients",
    "relaxed_cost",
    "relaxed_cost_gradients",
    "xi_matrix",
    "__version__",
]
