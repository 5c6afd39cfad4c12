"""Desk-scale autonomous mobility-on-demand simulator with decentralized ADMM motion planning."""
from .admm import PlannerConfig, PlannedTrajectory, build_problem, solve_subgraph
from .dynamics import VehicleParams, linearize, rollout, step
from .sim import EpisodeConfig, EpisodeReport, load_scenario, run_benchmark, run_episode
from .world import build_communication_graph, build_grid_city, compute_metrics

__all__ = [
    "PlannerConfig", "PlannedTrajectory", "build_problem", "solve_subgraph",
    "VehicleParams", "linearize", "rollout", "step",
    "EpisodeConfig", "EpisodeReport", "load_scenario", "run_benchmark", "run_episode",
    "build_communication_graph", "build_grid_city", "compute_metrics",
]

__version__ = "0.1.0"
