"""Ride-pooling enumeration, exact matching and complexity tracing."""

from .demand import DemandConfig, TripRequest, generate_demand
from .exmas import BehavioralParams, Ride, RideSet, enumerate_all
from .matching import MatchingProblem, MatchingSolution, solve_exact, solve_greedy
from .metrics import ComplexityTrace, GuardLimits, theoretical_search_space
from .netgraph import Network, SkimMatrix, build_skim, generate_grid, load_network

__all__ = [
    "BehavioralParams",
    "ComplexityTrace",
    "DemandConfig",
    "GuardLimits",
    "MatchingProblem",
    "MatchingSolution",
    "Network",
    "Ride",
    "RideSet",
    "SkimMatrix",
    "TripRequest",
    "build_skim",
    "enumerate_all",
    "generate_demand",
    "generate_grid",
    "load_network",
    "solve_exact",
    "solve_greedy",
    "theoretical_search_space",
]

__version__ = "0.1.0"
