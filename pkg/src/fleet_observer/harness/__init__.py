"""Scenario loading, simulation runs, Monte Carlo campaigns and output writers."""

from .run import ObservabilityError, compare_baseline, mse_metrics, prepare, run_scenario
from .scenario import PRESETS, Scenario, ScenarioError, load_preset, load_scenario, validate_scenario

__all__ = [
    "ObservabilityError", "compare_baseline", "mse_metrics", "prepare", "run_scenario",
    "PRESETS", "Scenario", "ScenarioError", "load_preset", "load_scenario", "validate_scenario",
]
