"""Slow, obviously-correct reference implementations used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from platoon_dmpc.ocp import OcpProblem, terminal_output_target, total_cost
from platoon_dmpc.vehicle import drag_force, equilibrium_torque, rollout


def complete_inputs(prob: OcpProblem, head):
    """Solve the last three inputs so the terminal equalities hold exactly.

    Returns ``None`` when the completion leaves the input box.
    """
    p, dt, n = prob.params, prob.dt, prob.horizon
    lo, hi = prob.bounds
    lag = 1.0 - dt / p.tau
    gain = dt / p.tau
    ratio = p.driveline_eff / p.wheel_radius
    s_t, v_t = terminal_output_target(prob)
    x = rollout(prob.x0, list(head), p, dt)[-1]  # state at index n-3
    s3, v3, T3 = x
    # index n-2: position and speed do not depend on the remaining inputs yet
    s2 = s3 + v3 * dt
    v2 = v3 + dt / p.mass * (ratio * T3 - drag_force(v3, p))
    # s(n) = s2 + v2 dt + v1 dt fixes v1 = v(n-1)
    v1 = (s_t - s2 - v2 * dt) / dt
    T2 = ((v1 - v2) * p.mass / dt + drag_force(v2, p)) / ratio
    # T(n-2) = lag*T(n-3) + gain*u(n-3)
    u_a = (T2 - lag * T3) / gain
    T1 = ((v_t - v1) * p.mass / dt + drag_force(v1, p)) / ratio
    u_b = (T1 - lag * T2) / gain
    u_c = (equilibrium_torque(v_t, p) - lag * T1) / gain
    tail = [u_a, u_b, u_c]
    if any(not (lo <= u <= hi) for u in tail):
        return None
    return list(head) + tail


def brute_force(prob: OcpProblem, points: int = 21):
    """Grid over the free leading inputs, refined once around the best cell."""
    free = prob.horizon - 3
    lo, hi = prob.bounds

    def search(axes):
        best = (math.inf, None)
        for head in itertools.product(*axes):
            u = complete_inputs(prob, head)
            if u is None:
                continue
            c = total_cost(prob, u)
            if c < best[0]:
                best = (c, u)
        return best

    if free == 0:
        return search([])
    axes = [np.linspace(lo, hi, points)] * free
    cost, u = search(axes)
    if u is None:
        return cost, u
    cell = (hi - lo) / (points - 1)
    axes = [np.linspace(max(lo, c - cell), min(hi, c + cell), points) for c in u[:free]]
    refined = search(axes)
    return refined if refined[0] < cost else (cost, u)


def random_two_node_instance(rng: np.random.Generator, horizon: int = 3):
    """A feasible local problem of a 2-follower PF platoon (leader -> 1 -> 2).

    Either follower's problem is drawn; the broadcast it listens to ends a
    small random offset away from where coasting at equilibrium torque would
    take it, so the terminal equalities are reachable inside the box.
    """
    from platoon_dmpc.ocp import AssumedTrajectory, WeightSet, assumed_from_states, leader_broadcast
    from platoon_dmpc.vehicle import VehicleParams, VehicleState, input_bounds, rollout_array

    rows = [
        (1035.7, 0.51, 0.99, 0.30),
        (1849.1, 0.75, 1.15, 0.38),
        (1934.0, 0.78, 1.17, 0.39),
        (1678.7, 0.70, 1.12, 0.37),
    ]
    dt, d0 = 0.1, 20.0
    while True:
        node = int(rng.integers(1, 3))
        p = VehicleParams(*rows[int(rng.integers(len(rows)))])
        v0 = 20.0 + rng.uniform(-0.5, 0.5)
        x0 = VehicleState(-node * d0 + rng.uniform(-0.3, 0.3), v0, equilibrium_torque(v0, p) + rng.uniform(-50, 50))
        coast = rollout_array(x0, np.full(horizon, equilibrium_torque(v0, p)), p, dt)
        own_u = equilibrium_torque(v0, p) + rng.uniform(-100, 100, horizon)
        own = assumed_from_states(node, rollout_array(x0, own_u, p, dt)[:horizon], own_u, dt)
        end = coast[-1, :2] + rng.uniform(-0.02, 0.02, 2)
        if node == 1:
            # the leader broadcast is a constant-speed line; place it so it ends at end + d0
            v_l = end[1]
            s_l = end[0] + d0 - v_l * horizon * dt
            leader = leader_broadcast(s_l, v_l, horizon, dt)
            prob = OcpProblem(1, x0, p, input_bounds(p, 20.0), WeightSet(10, 1, 10, 0), dt, horizon, own, {}, d0, leader=leader)
        else:
            k = np.arange(horizon + 1)
            outs = np.column_stack([end[0] + d0 - end[1] * (horizon - k) * dt, np.full(horizon + 1, end[1])])
            nb = AssumedTrajectory(1, outs)
            prob = OcpProblem(2, x0, p, input_bounds(p, 20.0), WeightSet(0, 1, 10, 5), dt, horizon, own, {1: nb}, d0)
        if complete_inputs(prob, [0.0] * 0 if horizon == 3 else list(own_u[: horizon - 3])) is not None:
            return prob
