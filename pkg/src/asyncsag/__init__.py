"""Fully asynchronous distributed policy evaluation via saddle-point
averaged gradients, with an exact linear-system replay for verification."""

from __future__ import annotations

from .graph import (DirectedGraph, diameter, generate_topology,
                    is_strongly_connected, load_edge_list)
from .mdp import (Mdp, TdSample, Transition, build_random_mdp,
                  make_feature_map, partition_samples, random_policy,
                  sample_trajectory, stationary_distribution)
from .mspbe import (ProblemSpec, SampleStats, SpectralConstants, aggregate,
                    check_contraction, full_gradient, problem_from_samples,
                    saddle_gradient, solve_problem, solve_saddle,
                    spectral_constants, zeta_threshold)
from .protocol import (Message, NodeState, SampleSelector, activate,
                       init_node, selector_rng)
from .simulator import (ActivationSchedule, AssumptionViolation, DelayModel,
                        EventTrace, estimate_rate, metrics, run_async,
                        run_sync, verify_assumption1b, write_metrics_csv)
from .augmented import (AugmentedState, EventMatrices, RateConstants,
                        build_event_matrices, check_equivalence,
                        evolve_weights, product_contraction, rank_one_distance,
                        rate_constants, replay, tracking_residual)
from .baselines import centralized_gd, centralized_sag

__version__ = "0.1.0"

__all__ = [
    "DirectedGraph", "diameter", "generate_topology", "is_strongly_connected",
    "load_edge_list",
    "Mdp", "TdSample", "Transition", "build_random_mdp", "make_feature_map",
    "partition_samples", "random_policy", "sample_trajectory",
    "stationary_distribution",
    "ProblemSpec", "SampleStats", "SpectralConstants", "aggregate",
    "check_contraction", "full_gradient", "problem_from_samples",
    "saddle_gradient", "solve_problem", "solve_saddle", "spectral_constants",
    "zeta_threshold",
    "Message", "NodeState", "SampleSelector", "activate", "init_node",
    "selector_rng",
    "ActivationSchedule", "AssumptionViolation", "DelayModel", "EventTrace",
    "estimate_rate", "metrics", "run_async", "run_sync",
    "verify_assumption1b", "write_metrics_csv",
    "AugmentedState", "EventMatrices", "RateConstants",
    "build_event_matrices", "check_equivalence", "evolve_weights",
    "product_contraction", "rank_one_distance", "rate_constants", "replay",
    "tracking_residual",
    "centralized_gd", "centralized_sag",
    "__version__",
]
