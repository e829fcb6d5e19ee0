"""Numerical laboratory for small-noise McKean-Vlasov equations: particle
simulation, CLT fluctuations and moderate-deviation rate functions."""

from .devlab import (
    Control,
    SupEvent,
    exit_rate,
    exponential_equivalence_check,
    girsanov_is_estimate,
    mdp_decay_experiment,
    rate_function,
    solve_skeleton,
)
from .engine import (
    BrownianBundle,
    Path,
    PathEnsemble,
    TimeGrid,
    deviation_processes,
    lambda_scale,
    simulate_fluctuation,
    simulate_particles,
    solve_limit_ode,
)
from .fluctlab import clt_error, clt_rate_fit
from .measure import EmpiricalMeasure, dirac, perturb, second_moment, wasserstein2
from .model import CoefficientModel, build_model, kuramoto, linear_mean_field

__version__ = "0.1.0"
