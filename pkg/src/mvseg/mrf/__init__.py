"""Markov random field regularization solved with graph cuts."""
from .maxflow import FlowGraph, cut_capacity, max_flow
from .model import (
    DEFAULT_COST_CAP,
    EnergyBreakdown,
    NeighborhoodSystem,
    PairGraph,
    TransitionModel,
    load_transition,
    mrf_priors,
    potts_delta,
    total_energy,
)
from .moves import (
    MoveLog,
    alpha_beta_swap,
    alpha_expansion,
    binary_cut,
    data_costs,
    data_costs_from_model,
    regularize,
    solve_binary,
)

__all__ = [
    "DEFAULT_COST_CAP",
    "EnergyBreakdown",
    "FlowGraph",
    "MoveLog",
    "NeighborhoodSystem",
    "PairGraph",
    "TransitionModel",
    "alpha_beta_swap",
    "alpha_expansion",
    "binary_cut",
    "cut_capacity",
    "data_costs",
    "data_costs_from_model",
    "load_transition",
    "max_flow",
    "mrf_priors",
    "potts_delta",
    "regularize",
    "solve_binary",
    "total_energy",
]
