"""Deterministic scenario runner, fault injection, invariants and audit."""

from .scenario import FaultKind, FaultSpec, Scenario, ScenarioError, load_scenario
from .sim import ExecutionTrace, NonQuiescent, Simulation, run_scenario

__all__ = [
    "ExecutionTrace", "FaultKind", "FaultSpec", "NonQuiescent", "Scenario",
    "ScenarioError", "Simulation", "load_scenario", "run_scenario",
]
