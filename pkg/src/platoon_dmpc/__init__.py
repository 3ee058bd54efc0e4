"""Distributed model predictive control of a heterogeneous vehicle platoon."""
from .engine import EngineConfig, EngineHalt, LeaderModel, StepRecord, leader_state, run
from .monitor import StabilityMonitor, check_weight_condition
from .ocp import OcpProblem, OcpSolution, Status, WeightSet
from .scenario import ScenarioConfig, ScenarioError, load_scenario, run_scenario
from .sqp import SolverOptions, solve_ocp
from .topology import Topology, from_preset
from .vehicle import VehicleParams, VehicleState

__all__ = [
    "EngineConfig",
    "EngineHalt",
    "LeaderModel",
    "OcpProblem",
    "OcpSolution",
    "ScenarioConfig",
    "ScenarioError",
    "SolverOptions",
    "StabilityMonitor",
    "Status",
    "StepRecord",
    "Topology",
    "VehicleParams",
    "VehicleState",
    "WeightSet",
    "check_weight_condition",
    "from_preset",
    "leader_state",
    "load_scenario",
    "run",
    "run_scenario",
    "solve_ocp",
]
