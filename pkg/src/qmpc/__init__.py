"""Q-learning with model predictive controllers as function approximators."""

__version__ = "0.1.0"

from .envs import EnvSpec, Transition, LtiEnv, EvaporationEnv, step, make_lti_env, make_evaporation_like_env
from .lqr import LqrCost, LqrTheta, solve_riccati, riccati_residual, q1_exact, v0_exact, gain_from, wrong_td_error
from .params import ThetaNonCondensed, ThetaCondensed
from .ocp import OcpInstance, build_q_problem, build_v_problem, build_condensed_q, build_condensed_v, condense_lti
from .solver import MpcSolution, Sensitivity, solve, grad_q_theta, grad_v_theta, sensitivity_y
from .learner import (
    LearnerConfig,
    TargetPair,
    History,
    MpcQFunction,
    CondensedQFunction,
    td_error,
    standard_update,
    batch_fit,
    enforce_pd,
    mix,
    explore,
    train,
)
from .errors import QmpcError, SolverError, DegeneracyError, ConfigError

__all__ = [
    "EnvSpec",
    "Transition",
    "LtiEnv",
    "EvaporationEnv",
    "step",
    "make_lti_env",
    "make_evaporation_like_env",
    "LqrCost",
    "LqrTheta",
    "solve_riccati",
    "riccati_residual",
    "q1_exact",
    "v0_exact",
    "gain_from",
    "wrong_td_error",
    "ThetaNonCondensed",
    "ThetaCondensed",
    "OcpInstance",
    "build_q_problem",
    "build_v_problem",
    "build_condensed_q",
    "build_condensed_v",
    "condense_lti",
    "MpcSolution",
    "Sensitivity",
    "solve",
    "grad_q_theta",
    "grad_v_theta",
    "sensitivity_y",
    "LearnerConfig",
    "TargetPair",
    "History",
    "MpcQFunction",
    "CondensedQFunction",
    "td_error",
    "standard_update",
    "batch_fit",
    "enforce_pd",
    "mix",
    "explore",
    "train",
    "QmpcError",
    "SolverError",
    "DegeneracyError",
    "ConfigError",
]
