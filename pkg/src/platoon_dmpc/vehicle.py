"""Third-order nonlinear longitudinal vehicle model.

State is (position, velocity, integrated driveline torque); the control input
is the desired driving/braking torque, reached through a first-order lag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class VehicleState(NamedTuple):
    position: float
    velocity: float
    torque: float


class Output(NamedTuple):
    position: float
    velocity: float


class InputBounds(NamedTuple):
    u_min: float
    u_max: float


@dataclass(frozen=True)
class VehicleParams:
    mass: float
    tau: float
    drag_coeff: float
    wheel_radius: float
    driveline_eff: float = 1.0
    rolling_coeff: float = 0.01
    gravity: float = 9.8
    accel_max: float = 6.0
    accel_min: float = -6.0

    def __post_init__(self):
        checks = [
            (self.mass > 0, "mass > 0"),
            (self.tau > 0, "tau > 0"),
            (self.wheel_radius > 0, "wheel_radius > 0"),
            (0 < self.driveline_eff <= 1, "0 < driveline_eff <= 1"),
            (self.drag_coeff >= 0, "drag_coeff >= 0"),
            (self.rolling_coeff >= 0, "rolling_coeff >= 0"),
            (self.gravity > 0, "gravity > 0"),
            (self.accel_min < 0 < self.accel_max, "accel_min < 0 < accel_max"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValueError(f"invalid VehicleParams: requires {what}")


def drag_force(v: float, p: VehicleParams) -> float:
    """Aerodynamic plus rolling resistance [N] at speed ``v``."""
    return p.drag_coeff * v * v + p.mass * p.gravity * p.rolling_coeff


def equilibrium_torque(v: float, p: VehicleParams) -> float:
    """Driveline torque that exactly balances drag at speed ``v``."""
    return p.wheel_radius / p.driveline_eff * drag_force(v, p)


def equilibrium_torque_slope(v: float, p: VehicleParams) -> float:
    return p.wheel_radius / p.driveline_eff * 2.0 * p.drag_coeff * v


def step(x: VehicleState, u: float, p: VehicleParams, dt: float) -> VehicleState:
    """One explicit-Euler step of the longitudinal model.

    The input is not clipped; keeping ``u`` inside the box is the caller's job.
    """
    s, v, T = x
    s_next = s + v * dt
    v_next = v + dt / p.mass * (p.driveline_eff / p.wheel_radius * T - drag_force(v, p))
    T_next = T - T / p.tau * dt + u / p.tau * dt
    return VehicleState(s_next, v_next, T_next)


def rollout(
    x0: VehicleState, inputs: Sequence[float], p: VehicleParams, dt: float
) -> list[VehicleState]:
    states = [VehicleState(*x0)]
    for u in inputs:
        states.append(step(states[-1], float(u), p, dt))
    return states


def output_of(x: VehicleState) -> Output:
    return Output(x[0], x[1])


def input_bounds(p: VehicleParams, v_nominal: float) -> InputBounds:
    """Torque box equivalent to the acceleration limits at ``v_nominal``.

    Computed once and held fixed for the whole run.
    """
    if not v_nominal >= 0:
        raise ValueError("v_nominal must be >= 0")
    scale = p.wheel_radius / p.driveline_eff
    f = drag_force(v_nominal, p)
    return InputBounds(scale * (p.mass * p.accel_min + f), scale * (p.mass * p.accel_max + f))


def rollout_array(x0, inputs: np.ndarray, p: VehicleParams, dt: float) -> np.ndarray:
    """Same recursion as :func:`rollout`, returning an ``(n+1, 3)`` array."""
    n = len(inputs)
    out = np.empty((n + 1, 3))
    s, v, T = (float(c) for c in x0)
    out[0] = s, v, T
    k_v = dt / p.mass
    ratio = p.driveline_eff / p.wheel_radius
    rolling = p.mass * p.gravity * p.rolling_coeff
    ca = p.drag_coeff
    for k in range(n):
        u = float(inputs[k])
        # must stay bit-identical with step()
        s, v, T = (
            s + v * dt,
            v + k_v * (ratio * T - (ca * v * v + rolling)),
            T - T / p.tau * dt + u / p.tau * dt,
        )
        out[k + 1] = s, v, T
    return out


def is_finite_state(x: VehicleState) -> bool:
    return all(math.isfinite(c) for c in x)
