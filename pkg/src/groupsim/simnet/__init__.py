"""Deterministic discrete-event simulation of the management cluster."""

from .scenario import Scenario, ScenarioError, SimConfig, Topology  # noqa: F401
from .kernel import US, Kernel, Process, RunResult, fmt_time  # noqa: F401
from .runner import run_scenario  # noqa: F401
