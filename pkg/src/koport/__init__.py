"""Solver and simulator for no-borrowing consumption-investment with a
mean-reverting excess return (Kim-Omberg market), via convex duality, a
reflected dual state, and a free-boundary optimal stopping problem."""

from koport.model import (
    ModelParams,
    ValidationReport,
    validate_params,
    utility,
    dual_utility,
    dual_utility_prime,
    boundary_floor,
)

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "ValidationReport",
    "validate_params",
    "utility",
    "dual_utility",
    "dual_utility_prime",
    "boundary_floor",
    "__version__",
]
