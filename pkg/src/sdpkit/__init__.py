"""Average-cost stochastic dynamic programming on rectangular grids.

Library layout:

- :mod:`sdpkit.grids`: uniform rectangular grids, multilinear
  interpolation, grid-function persistence;
- :mod:`sdpkit.solver`: relative value iteration, policy evaluation
  and policy iteration for average-cost problems;
- :mod:`sdpkit.armodel`: AR(p) fitting, simulation and closed-form
  moments for the exogenous disturbance;
- :mod:`sdpkit.storage`: the energy-storage power-smoothing
  application built on the three modules above;
- :mod:`sdpkit.cli`: the ``sdpkit`` command-line pipeline.
"""

from .armodel import ARModel, fit_cls, fit_multilag, sample_acf, simulate, stationary_moments
from .grids import Axis, GridFunction, RectGrid, build_grid, interpolate
from .solver import (
    ControlProblem,
    DiscreteNoise,
    SolverConfig,
    bellman_sweep,
    discretize_noise,
    policy_evaluation,
    policy_iteration,
    value_iteration,
)
from .storage import StorageParams, build_problem, metrics, simulate_trajectory

__version__ = "0.1.0"

__all__ = [
    "ARModel",
    "Axis",
    "ControlProblem",
    "DiscreteNoise",
    "GridFunction",
    "RectGrid",
    "SolverConfig",
    "StorageParams",
    "bellman_sweep",
    "build_grid",
    "build_problem",
    "discretize_noise",
    "fit_cls",
    "fit_multilag",
    "interpolate",
    "metrics",
    "policy_evaluation",
    "policy_iteration",
    "sample_acf",
    "simulate",
    "simulate_trajectory",
    "stationary_moments",
    "value_iteration",
]
