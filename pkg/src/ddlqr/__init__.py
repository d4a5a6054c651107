"""Model-free LQR for output-feedback continuous-time LTI systems.

An input-output filter bank yields a substitute state whose projected data
matrix has full row rank; off-policy policy iteration and value iteration
then run on recorded data alone. A model-based oracle (observer placement,
state parameterization, Kleinman iteration) verifies every result.
"""
from .errors import DDLQRError, NumericalError, ValidationError
from .lti_sim import CostSpec, LtiPlant, SinusoidInput, simulate
from .substitute_state import FilterBank, build_filter_bank, collect_data, project
from .solvers import PiConfig, SolveReport, ViConfig, policy_iteration, value_iteration

__version__ = "0.1.0"

__all__ = [
    "CostSpec", "DDLQRError", "FilterBank", "LtiPlant", "NumericalError", "PiConfig",
    "SinusoidInput", "SolveReport", "ValidationError", "ViConfig", "build_filter_bank",
    "collect_data", "policy_iteration", "project", "simulate", "value_iteration",
]
