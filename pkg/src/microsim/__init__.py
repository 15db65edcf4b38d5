"""Event-driven simulator for microservice applications on a VM cluster."""

from .engine import EventKind, SimEvent, Simulator
from .model import Api, Deployment, Service, ServiceGraph, build_graph
from .registry import Scenario, ScenarioConfig, load_scenario_dir, load_scenario_files
from .simulation import Simulation, SimulationResult, run_scenario

__version__ = "0.1.0"

__all__ = [
    "EventKind", "SimEvent", "Simulator", "Api", "Service", "ServiceGraph", "Deployment",
    "build_graph", "Scenario", "ScenarioConfig", "load_scenario_dir", "load_scenario_files",
    "Simulation", "SimulationResult", "run_scenario",
]
