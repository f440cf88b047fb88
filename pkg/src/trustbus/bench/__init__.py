"""Benchmark harness: topology orchestration, scenario runs, and reports."""

from .config import ScenarioConfig
from .harness import run_scenario, stress_sweep
from .report import RunReport, compare_modes

__all__ = [
    "ScenarioConfig",
    "RunReport",
    "run_scenario",
    "stress_sweep",
    "compare_modes",
]
