"""Local open-loop optimal control problem solved by every follower.

Each follower minimises a sum of weighted (non-squared) Euclidean norms over
its horizon: tracking of the leader-derived set point (pinned nodes only),
torque deviation from the drag-balancing torque, deviation from its own
broadcast trajectory, and deviation from its neighbours' broadcasts. The
terminal output is pinned to the neighbourhood average and the terminal
torque to the equilibrium torque.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .vehicle import (
    InputBounds,
    Output,
    VehicleParams,
    VehicleState,
    equilibrium_torque,
    rollout_array,
)

PSD_TOL = 1e-12


class OcpError(ValueError):
    """Structural problem with an OCP instance (missing neighbour data, bad weights)."""


def _as_weight_matrix(value, name: str) -> np.ndarray:
    m = np.array(value, dtype=float)
    if m.ndim == 0:
        m = float(m) * np.eye(2)
    if m.shape != (2, 2):
        raise OcpError(f"weight {name} must be a scalar or a 2x2 matrix")
    if not np.allclose(m, m.T, atol=0.0, rtol=0.0):
        raise OcpError(f"weight {name} must be symmetric")
    if np.linalg.eigvalsh(m).min() < -PSD_TOL:
        raise OcpError(f"weight {name} must be positive semi-definite")
    return m


@dataclass(frozen=True)
class WeightSet:
    q: np.ndarray
    r: float
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _as_weight_matrix(self.q, "Q"))
        object.__setattr__(self, "f", _as_weight_matrix(self.f, "F"))
        object.__setattr__(self, "g", _as_weight_matrix(self.g, "G"))
        r = float(np.squeeze(self.r))
        if not r >= 0:
            raise OcpError("weight R must be >= 0")
        object.__setattr__(self, "r", r)

    @property
    def tracks_leader(self) -> bool:
        return bool(np.any(self.q != 0))

    def check_pinning(self, pinned: bool, node: int = 0):
        if not pinned and self.tracks_leader:
            raise OcpError(f"node {node} is not pinned to the leader, so Q must be 0")


def weighted_norm(x, w: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return math.sqrt(max(float(x @ w @ x), 0.0))


def spacing_vector(i: int, j: int, d0: float) -> np.ndarray:
    """Offset such that ``y_j + spacing_vector(i, j)`` is node i's desired output."""
    return np.array([-(i - j) * d0, 0.0])


@dataclass
class AssumedTrajectory:
    """Trajectory a node broadcasts to the nodes listening to it.

    ``outputs`` covers horizon indices 0..N_p; index N_p is the constant-speed
    extension of index N_p-1. The leader's broadcast has no inputs or states.
    """

    owner: int
    outputs: np.ndarray
    inputs: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.outputs.shape[0] - 1


def extend_terminal(traj: AssumedTrajectory, dt: float) -> Output:
    """Advance the output at index N_p-1 one step at constant speed."""
    s, v = traj.outputs[traj.horizon - 1] if traj.outputs.shape[0] > 1 else traj.outputs[0]
    return Output(float(s + v * dt), float(v))


def assumed_from_states(owner: int, states: np.ndarray, inputs: np.ndarray, dt: float) -> AssumedTrajectory:
    """Build a broadcast from ``N_p`` states (indices 0..N_p-1) and ``N_p`` inputs."""
    states = np.array(states[: len(inputs)], dtype=float)
    n = len(inputs)
    outputs = np.empty((n + 1, 2))
    outputs[:n] = states[:, :2]
    s, v = outputs[n - 1]
    outputs[n] = s + v * dt, v
    return AssumedTrajectory(owner, outputs, np.array(inputs, dtype=float), states)


def leader_broadcast(position: float, velocity: float, horizon: int, dt: float) -> AssumedTrajectory:
    """Constant-speed prediction the leader sends from its current state."""
    k = np.arange(horizon + 1)
    outputs = np.column_stack([position + velocity * k * dt, np.full(horizon + 1, velocity)])
    return AssumedTrajectory(0, outputs)


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"


@dataclass
class OcpProblem:
    node: int
    x0: VehicleState
    params: VehicleParams
    bounds: InputBounds
    weights: WeightSet
    dt: float
    horizon: int
    own: AssumedTrajectory
    neighbors: Mapping[int, AssumedTrajectory]
    spacing: float
    leader: Optional[AssumedTrajectory] = None
    desired: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = VehicleState(*(float(c) for c in self.x0))
        if self.horizon < 1:
            raise OcpError("horizon must be >= 1")
        if self.own.owner != self.node:
            raise OcpError("own assumed trajectory belongs to another node")
        if not self.neighbors and self.leader is None:
            raise OcpError(f"node {self.node} has an empty information set")
        for j, traj in self.neighbors.items():
            if traj.owner != j or j == self.node or j == 0:
                raise OcpError(f"bad neighbour trajectory for key {j}")
        for traj in (self.own, *self.neighbors.values(), *([self.leader] if self.leader else [])):
            if traj.outputs.shape != (self.horizon + 1, 2):
                raise OcpError(f"trajectory of node {traj.owner} does not span the horizon")
        self.weights.check_pinning(self.leader is not None, self.node)
        if self.leader is not None and self.desired is None:
            self.desired = self.leader.outputs + spacing_vector(self.node, 0, self.spacing)
        if self.desired is not None:
            self.desired = np.asarray(self.desired, dtype=float)

    @property
    def info_set(self) -> set[int]:
        return set(self.neighbors) | ({0} if self.leader is not None else set())

    def members(self):
        """``(j, trajectory)`` pairs for every node in the information set."""
        out = [(j, self.neighbors[j]) for j in sorted(self.neighbors)]
        if self.leader is not None:
            out.insert(0, (0, self.leader))
        return out


@dataclass
class OcpSolution:
    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    cost: float
    status: Status
    iterations: int
    terminal_residual: float
    kkt_residual: float = math.nan
    source: str = "sqp"
    notes: dict = field(default_factory=dict)


def stage_cost(
    y_p,
    u_p: float,
    y_a_self,
    y_a_neighbors: Mapping[int, object],
    prob: OcpProblem,
    k: int,
) -> float:
    """Unsmoothed stage cost of node ``prob.node`` at horizon index ``k``."""
    if not 0 <= k < prob.horizon:
        raise IndexError("stage index outside 0..N_p-1")
    w = prob.weights
    y_p = np.asarray(y_p, dtype=float)
    total = 0.0
    if prob.desired is not None and w.tracks_leader:
        total += weighted_norm(y_p - prob.desired[k], w.q)
    total += math.sqrt(w.r) * abs(u_p - equilibrium_torque(y_p[1], prob.params))
    total += weighted_norm(y_p - np.asarray(y_a_self, dtype=float), w.f)
    for j, y_j in y_a_neighbors.items():
        d = spacing_vector(prob.node, j, prob.spacing)
        total += weighted_norm(y_p - np.asarray(y_j, dtype=float) - d, w.g)
    return total


def stage_costs(prob: OcpProblem, inputs) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape != (prob.horizon,):
        raise OcpError(f"expected {prob.horizon} inputs, got {inputs.shape}")
    states = rollout_array(prob.x0, inputs, prob.params, prob.dt)
    costs = np.empty(prob.horizon)
    for k in range(prob.horizon):
        nbrs = {j: t.outputs[k] for j, t in prob.neighbors.items()}
        costs[k] = stage_cost(states[k, :2], inputs[k], prob.own.outputs[k], nbrs, prob, k)
    return costs


def total_cost(prob: OcpProblem, inputs) -> float:
    return float(np.sum(stage_costs(prob, inputs)))


def terminal_output_target(prob: OcpProblem) -> Output:
    members = prob.members()
    if not members:
        raise OcpError(f"node {prob.node} has an empty information set")
    acc = np.zeros(2)
    for j, traj in members:
        if traj.outputs.shape[0] < prob.horizon + 1:
            raise OcpError(f"trajectory of node {j} lacks the terminal index")
        acc += traj.outputs[prob.horizon] + spacing_vector(prob.node, j, prob.spacing)
    acc /= len(members)
    return Output(float(acc[0]), float(acc[1]))


def terminal_torque_target(v_terminal: float, p: VehicleParams) -> float:
    return equilibrium_torque(v_terminal, p)


def terminal_residual(prob: OcpProblem, states: np.ndarray) -> np.ndarray:
    """Residuals of the terminal equalities: position, velocity, torque."""
    target = terminal_output_target(prob)
    s, v, T = states[-1]
    return np.array([s - target[0], v - target[1], T - terminal_torque_target(v, prob.params)])


def solve(prob: OcpProblem, **options) -> OcpSolution:
    """Solve the local problem; see :mod:`platoon_dmpc.sqp` for the algorithm."""
    from .sqp import solve_ocp

    return solve_ocp(prob, **options)
