"""Deterministic simulation of authoritative-server game networking and digital-twin sensor scheduling."""

from .harness import Session, calibrate_lambda, run
from .scenario import Scenario, ScenarioError, load_scenario

__all__ = ["Scenario", "ScenarioError", "Session", "calibrate_lambda", "load_scenario", "run"]
__version__ = "0.1.0"
