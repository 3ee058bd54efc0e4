"""Synchronous distributed MPC loop for a leader-follower platoon.

Every step each follower solves its local problem using only what it has
received from its information set at the previous step boundary, applies the
first optimal input to its own vehicle, and publishes a shifted copy of its
optimal trajectory for the next step.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ocp import (
    AssumedTrajectory,
    OcpProblem,
    OcpSolution,
    Status,
    WeightSet,
    assumed_from_states,
    leader_broadcast,
    stage_costs,
)
from .sqp import SolverOptions, solve_ocp
from .topology import Topology, consensus_matrix, leader_set, neighbor_set
from .vehicle import (
    InputBounds,
    Output,
    VehicleParams,
    VehicleState,
    equilibrium_torque,
    input_bounds,
    rollout_array,
    step,
)


class EngineHalt(RuntimeError):
    """A local problem could not be solved; carries the records produced so far."""

    def __init__(self, message: str, records: list, diagnostic: dict):
        super().__init__(message)
        self.records = records
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class LeaderModel:
    """Piecewise-linear leader speed profile given as ``(time, velocity)`` breakpoints."""

    breakpoints: tuple
    initial_position: float = 0.0

    def __post_init__(self):
        pts = tuple((float(t), float(v)) for t, v in self.breakpoints)
        if not pts:
            raise ValueError("leader profile needs at least one breakpoint")
        times = [t for t, _ in pts]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("leader breakpoint times must be strictly increasing")
        object.__setattr__(self, "breakpoints", pts)

    @classmethod
    def constant(cls, velocity: float, initial_position: float = 0.0) -> "LeaderModel":
        return cls(((0.0, velocity),), initial_position)

    @property
    def is_constant(self) -> bool:
        return len({v for _, v in self.breakpoints}) == 1

    @property
    def settle_time(self) -> float:
        """Time after which the speed no longer changes."""
        return 0.0 if self.is_constant else self.breakpoints[-1][0]

    def velocity(self, t: float) -> float:
        pts = self.breakpoints
        if t <= pts[0][0]:
            return pts[0][1]
        if t >= pts[-1][0]:
            return pts[-1][1]
        i = bisect_right([p[0] for p in pts], t) - 1
        (t0, v0), (t1, v1) = pts[i], pts[i + 1]
        return v0 + (v1 - v0) * (t - t0) / (t1 - t0)

    def position(self, t: float) -> float:
        """Closed-form integral of the speed profile from 0 to ``t``."""
        pts = self.breakpoints
        # knots are the breakpoint times plus 0 and t, integrated by trapezoids
        knots = sorted({0.0, t, *(p[0] for p in pts if 0.0 < p[0] < t)})
        s = self.initial_position
        for a, b in zip(knots, knots[1:]):
            s += 0.5 * (self.velocity(a) + self.velocity(b)) * (b - a)
        return s


RAMP_LEADER = LeaderModel(((1.0, 20.0), (2.0, 22.0)), 0.0)


def leader_state(m: LeaderModel, t_seconds: float) -> Output:
    if t_seconds < 0:
        raise ValueError("time must be >= 0")
    return Output(m.position(t_seconds), m.velocity(t_seconds))


@dataclass
class EngineConfig:
    dt: float
    horizon: int
    spacing: float
    params: Sequence[VehicleParams]
    topology: Topology
    weights: Sequence[WeightSet]
    v_nominal: float = 20.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    threads: int = 1

    def __post_init__(self):
        n = self.topology.follower_count
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.horizon < 3:
            # three terminal equalities need at least three inputs
            raise ValueError("horizon must be >= 3")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if len(self.params) != n or len(self.weights) != n:
            raise ValueError(f"need {n} vehicle parameter sets and {n} weight sets")
        for i, w in enumerate(self.weights, start=1):
            w.check_pinning(bool(self.topology.pinning[i - 1]), i)
        consensus_matrix(self.topology)  # every follower needs an information source
        self.bounds = [input_bounds(p, self.v_nominal) for p in self.params]

    @property
    def followers(self) -> int:
        return self.topology.follower_count


def desired_setpoint(i: int, m: LeaderModel, t: float, cfg: EngineConfig) -> np.ndarray:
    """Set point of pinned node ``i`` over horizon indices 0..N_p as ``(s, v)`` rows."""
    assert cfg.topology.pinning[i - 1], f"node {i} is not pinned to the leader"
    s0, v0 = leader_state(m, t)
    k = np.arange(cfg.horizon + 1)
    return np.column_stack([s0 + v0 * k * cfg.dt - i * cfg.spacing, np.full(k.size, v0)])


def setpoint_states(cfg: EngineConfig, m: LeaderModel, t: float = 0.0) -> list[VehicleState]:
    """Every follower exactly at its desired gap, at leader speed and equilibrium torque."""
    s0, v0 = leader_state(m, t)
    return [
        VehicleState(s0 - i * cfg.spacing, v0, equilibrium_torque(v0, p))
        for i, p in enumerate(cfg.params, start=1)
    ]


@dataclass
class EngineState:
    t: int
    states: list
    assumed: dict


@dataclass
class StepRecord:
    t: int
    inputs: np.ndarray
    states: np.ndarray
    costs: np.ndarray
    statuses: list
    terminal_residuals: np.ndarray
    spacing_errors: np.ndarray
    velocity_errors: np.ndarray
    first_stage_costs: np.ndarray
    solutions: list = field(repr=False, default_factory=list)
    assumed: dict = field(repr=False, default_factory=dict)
    leader: Output = Output(0.0, 0.0)
    leader_next: Output = Output(0.0, 0.0)
    sources: list = field(default_factory=list)


def initialize(cfg: EngineConfig, initial_states: Sequence) -> EngineState:
    n = cfg.followers
    if len(initial_states) != n:
        raise ValueError(f"expected {n} initial states")
    states = [VehicleState(*(float(c) for c in x)) for x in initial_states]
    assumed = {}
    for i, (x, p) in enumerate(zip(states, cfg.params), start=1):
        u = np.full(cfg.horizon, equilibrium_torque(x.velocity, p))
        traj = rollout_array(x, u, p, cfg.dt)
        assumed[i] = assumed_from_states(i, traj[: cfg.horizon], u, cfg.dt)
    return EngineState(0, states, assumed)


def shift_assumed(sol: OcpSolution, p: VehicleParams, dt: float, owner: int) -> AssumedTrajectory:
    if sol.status == Status.INFEASIBLE:
        raise ValueError("cannot shift an infeasible solution")
    n = len(sol.inputs)
    u = np.empty(n)
    u[:-1] = sol.inputs[1:]
    u[-1] = equilibrium_torque(sol.states[n, 1], p)
    states = rollout_array(sol.states[1], u, p, dt)
    return assumed_from_states(owner, states[:n], u, dt)


def build_problem(cfg: EngineConfig, state: EngineState, i: int, leader_traj: AssumedTrajectory) -> OcpProblem:
    """Local problem of node ``i`` from its information set only."""
    topo = cfg.topology
    neighbors = {j: state.assumed[j] for j in sorted(neighbor_set(topo, i))}
    return OcpProblem(
        node=i,
        x0=state.states[i - 1],
        params=cfg.params[i - 1],
        bounds=cfg.bounds[i - 1],
        weights=cfg.weights[i - 1],
        dt=cfg.dt,
        horizon=cfg.horizon,
        own=state.assumed[i],
        neighbors=neighbors,
        spacing=cfg.spacing,
        leader=leader_traj if leader_set(topo, i) else None,
    )


def _errors(cfg: EngineConfig, states: Sequence, leader: Output):
    pos = np.array([leader.position] + [x[0] for x in states])
    vel = np.array([x[1] for x in states])
    return pos[:-1] - pos[1:] - cfg.spacing, vel - leader.velocity


def engine_step(cfg: EngineConfig, m: LeaderModel, state: EngineState, records: Optional[list] = None):
    t = state.t
    leader_now = leader_state(m, t * cfg.dt)
    leader_next = leader_state(m, (t + 1) * cfg.dt)
    leader_traj = leader_broadcast(leader_now.position, leader_now.velocity, cfg.horizon, cfg.dt)
    problems = [build_problem(cfg, state, i, leader_traj) for i in range(1, cfg.followers + 1)]

    def solve_one(prob):
        return solve_ocp(prob, cfg.solver)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            solutions = list(pool.map(solve_one, problems))
    else:
        solutions = [solve_one(p) for p in problems]

    bad = [s.node for s, sol in zip(problems, solutions) if sol.status == Status.INFEASIBLE]
    if bad:
        diag = {
            "t": t,
            "nodes": bad,
            "phase1_residual": {i: solutions[i - 1].notes.get("phase1_residual") for i in bad},
        }
        raise EngineHalt(f"local problem infeasible at step {t} for nodes {bad}", list(records or []), diag)

    # apply the first input to each true plant, then exchange at the step boundary
    new_states = [step(x, float(sol.inputs[0]), p, cfg.dt) for x, sol, p in zip(state.states, solutions, cfg.params)]
    new_assumed = {
        i: shift_assumed(sol, cfg.params[i - 1], cfg.dt, i) for i, sol in enumerate(solutions, start=1)
    }
    spacing_err, velocity_err = _errors(cfg, new_states, leader_next)
    record = StepRecord(
        t=t,
        inputs=np.array([sol.inputs[0] for sol in solutions]),
        states=np.array(new_states, dtype=float),
        costs=np.array([sol.cost for sol in solutions]),
        statuses=[sol.status for sol in solutions],
        terminal_residuals=np.array([sol.terminal_residual for sol in solutions]),
        spacing_errors=spacing_err,
        velocity_errors=velocity_err,
        first_stage_costs=np.array([stage_costs(p, sol.inputs)[0] for p, sol in zip(problems, solutions)]),
        solutions=solutions,
        assumed=dict(state.assumed),
        leader=leader_now,
        leader_next=leader_next,
        sources=[sol.source for sol in solutions],
    )
    return EngineState(t + 1, new_states, new_assumed), record


def run(cfg: EngineConfig, m: LeaderModel, initial_states: Sequence, steps: int, callback=None) -> list:
    """Run ``steps`` synchronous iterations; raises :class:`EngineHalt` on infeasibility."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = initialize(cfg, initial_states)
    records = []
    for _ in range(steps):
        state, rec = engine_step(cfg, m, state, records)
        records.append(rec)
        if callback is not None:
            callback(rec)
    return records


def initial_errors(cfg: EngineConfig, m: LeaderModel, initial_states: Sequence):
    return _errors(cfg, initial_states, leader_state(m, 0.0))


def ramp_end_step(m: LeaderModel, dt: float) -> int:
    """First step index at which the leader runs at its final speed."""
    return int(math.ceil(m.settle_time / dt - 1e-9))
