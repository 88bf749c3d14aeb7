"""Confidence-weighted bundle adjustment."""

from probslam.ba.problem import (
    BAProblem,
    Landmark,
    Observation,
    attach_weights,
    format_problem,
    read_problem,
    residual,
    residuals,
    weighted_cost,
    write_problem,
)
from probslam.ba.solver import SolveOptions, SolveReport, Termination, cost_gradient, solve, solve_independent

__all__ = [
    "BAProblem",
    "Landmark",
    "Observation",
    "SolveOptions",
    "SolveReport",
    "Termination",
    "attach_weights",
    "cost_gradient",
    "format_problem",
    "read_problem",
    "residual",
    "residuals",
    "solve",
    "solve_independent",
    "weighted_cost",
    "write_problem",
]
