"""Fisher-information-optimal control for parameter estimation in diffusions.

Policies are computed by dynamic programming on a Markov chain
approximation of a controlled diffusion; closed-loop experiments combine
the policy with a particle filter and grid maximum likelihood.
"""
from .dp import ControlSet, PolicyTable, PriorGrid, lookup_control, solve_policy, stationary_policy
from .experiment import ExperimentConfig, SummaryStats, emit_table, run_batch, run_trial
from .filter import LikelihoodCurve, MleResult, grid_mle, run_filter
from .mca import Grid, MCAConfig, validate
from .models import ObservationModel, make_model
from .sde import Trajectory, euler_step, fi_integrand, path_log_likelihood, simulate_path

__version__ = "0.1.0"

__all__ = [
    "ControlSet", "PolicyTable", "PriorGrid", "lookup_control", "solve_policy", "stationary_policy",
    "ExperimentConfig", "SummaryStats", "emit_table", "run_batch", "run_trial",
    "LikelihoodCurve", "MleResult", "grid_mle", "run_filter",
    "Grid", "MCAConfig", "validate", "ObservationModel", "make_model",
    "Trajectory", "euler_step", "fi_integrand", "path_log_likelihood", "simulate_path",
    "__version__",
]
