"""Numerical laboratory for G-Brownian motion: G-heat solver, capacities, path sampling."""

__version__ = "0.1.0"

from .band import (
    BandError,
    TerminalPayoff,
    VolatilityBand,
    alpha_exponent,
    g_value,
    linear_gaussian_solution,
    supersolution_v,
)
from .capacity import (
    CapacityEstimate,
    capacity_monotone_event,
    capacity_product_check,
    capacity_running_max,
    capacity_terminal_ball,
    capacity_terminal_halfline,
    holder_chain_bound,
    holder_exponent_count,
    holder_first_n_below,
)
from .policy import ControlPolicy
from .sampler import PathEnsemble, StatSpec, path_statistics, sample_paths
from .solver import (
    Grid1D,
    SolverParams,
    SpaceTimeField,
    TimeGrid,
    extract_feedback_policy,
    rho_limit,
    solve,
    solve_auto,
)
from .verify import CheckReport, run_suite

__all__ = [n for n in dir() if not n.startswith("_")]
