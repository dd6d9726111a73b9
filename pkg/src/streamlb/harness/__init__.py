"""Scenario harness: impairments, virtual-clock runs, loopback runs."""

from .impair import ImpairHop, ImpairmentProfile, impair
from .scenario import (
    Scenario,
    ScenarioError,
    ScenarioReport,
    ScenarioTimeout,
    evaluate_assertions,
    run_scenario,
)

__all__ = [
    "ImpairHop",
    "ImpairmentProfile",
    "impair",
    "Scenario",
    "ScenarioError",
    "ScenarioReport",
    "ScenarioTimeout",
    "evaluate_assertions",
    "run_scenario",
]
