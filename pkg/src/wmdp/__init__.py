"""Solvers, distances, aggregation, learning and perturbation bounds for finite MDPs on Euclidean grids."""

from .mdp import (
    ExplorationPolicy,
    FiniteMDP,
    ModelError,
    MonteCarloEstimate,
    Trajectory,
    load_model,
    mc_average_cost,
    mc_discounted_cost,
    save_model,
    simulate,
    validate,
)
from .metrics import (
    DiscreteMeasure,
    d_f,
    kernel_d_f,
    kernel_lipschitz_in_state,
    kernel_w1,
    lipschitz_constant,
    w1,
    w1_1d,
    w1_exact,
)
from .solve import (
    CanonicalTriplet,
    ConvergenceError,
    DiscountedSolution,
    bellman_apply,
    find_minorizer,
    policy_evaluation_average,
    policy_evaluation_discounted,
    solve_acoe_minorization,
    solve_discounted,
    vanishing_discount_gain,
)

__version__ = "0.1.0"

__all__ = [
    "ExplorationPolicy",
    "FiniteMDP",
    "ModelError",
    "MonteCarloEstimate",
    "Trajectory",
    "load_model",
    "mc_average_cost",
    "mc_discounted_cost",
    "save_model",
    "simulate",
    "validate",
    "DiscreteMeasure",
    "d_f",
    "kernel_d_f",
    "kernel_lipschitz_in_state",
    "kernel_w1",
    "lipschitz_constant",
    "w1",
    "w1_1d",
    "w1_exact",
    "CanonicalTriplet",
    "ConvergenceError",
    "DiscountedSolution",
    "bellman_apply",
    "find_minorizer",
    "policy_evaluation_average",
    "policy_evaluation_discounted",
    "solve_acoe_minorization",
    "solve_discounted",
    "vanishing_discount_gain",
]
