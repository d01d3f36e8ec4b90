"""Worst-case dependence search for black-box models via vine copulas."""

from .copulas import PairCopula, tau_to_theta, theta_to_tau
from .estimation import QuantileEstimate, bootstrap_ci, empirical_cdf, empirical_quantile, estimate_quantile
from .margins import Margin
from .models import Expression, Model
from .search import (Problem, RunResult, SearchSpace, estimate_cost, grid_search_min, greedy_search,
                     make_grid, permuted_restarts, tau_curve)
from .vine import DependenceModel, VineStructure, build_vine_from_pairs, sample_vine

__version__ = "0.1.0"

__all__ = [
    "PairCopula", "tau_to_theta", "theta_to_tau", "QuantileEstimate", "bootstrap_ci", "empirical_cdf",
    "empirical_quantile", "estimate_quantile", "Margin", "Expression", "Model", "Problem", "RunResult",
    "SearchSpace", "estimate_cost", "grid_search_min", "greedy_search", "make_grid", "permuted_restarts",
    "tau_curve", "DependenceModel", "VineStructure", "build_vine_from_pairs", "sample_vine",
]
