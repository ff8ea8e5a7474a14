"""Regularized Jacobi decomposition for coupled convex quadratic programs."""

from regjacobi.errors import InfeasibleSetError, InvalidArgumentError, NumericalFailure
from regjacobi.iteration import IterationConfig, IterationTrace, jacobi_step, run
from regjacobi.problem import BlockPartition, QuadraticObjective, SmoothObjective
from regjacobi.sets import Box, BudgetBox, Polytope
from regjacobi.spectral import SpectralBounds, compute_bounds, lambda_max_sym, pick_c

__version__ = "0.1.0"

__all__ = [
    "BlockPartition", "Box", "BudgetBox", "InfeasibleSetError", "InvalidArgumentError",
    "IterationConfig", "IterationTrace", "NumericalFailure", "Polytope", "QuadraticObjective",
    "SmoothObjective", "SpectralBounds", "compute_bounds", "jacobi_step", "lambda_max_sym",
    "pick_c", "run",
]
