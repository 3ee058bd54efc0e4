import math

import numpy as np
import pytest

from platoon_dmpc.vehicle import (
    InputBounds,
    Output,
    VehicleParams,
    VehicleState,
    drag_force,
    equilibrium_torque,
    input_bounds,
    output_of,
    rollout,
    rollout_array,
    step,
)

ROW1 = VehicleParams(1035.7, 0.51, 0.99, 0.30)
ROW2 = VehicleParams(1849.1, 0.75, 1.15, 0.38)
SIMPLE = VehicleParams(mass=1000.0, tau=0.5, drag_coeff=1.0, wheel_radius=0.3)


def test_defaults():
    assert (ROW1.driveline_eff, ROW1.rolling_coeff, ROW1.gravity) == (1.0, 0.01, 9.8)
    assert (ROW1.accel_max, ROW1.accel_min) == (6.0, -6.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mass=0.0),
        dict(tau=-1.0),
        dict(wheel_radius=0.0),
        dict(driveline_eff=1.5),
        dict(drag_coeff=-0.1),
        dict(rolling_coeff=-0.01),
        dict(gravity=0.0),
        dict(accel_max=0.0),
        dict(accel_min=1.0),
    ],
)
def test_params_validation(kwargs):
    base = dict(mass=1000.0, tau=0.5, drag_coeff=1.0, wheel_radius=0.3)
    with pytest.raises(ValueError):
        VehicleParams(**{**base, **kwargs})


def test_drag_force_examples():
    assert drag_force(20.0, ROW1) == pytest.approx(497.50, abs=0.005)
    assert drag_force(22.0, ROW2) == pytest.approx(737.81, abs=0.005)
    no_roll = VehicleParams(1000.0, 0.5, 1.0, 0.3, rolling_coeff=0.0)
    assert drag_force(0.0, no_roll) == 0.0


def test_equilibrium_torque_examples():
    assert equilibrium_torque(20.0, ROW1) == pytest.approx(149.25, abs=0.005)
    assert equilibrium_torque(20.0, ROW2) == pytest.approx(243.66, abs=0.005)
    # 0.38 * 737.81 by hand; the drag value above fixes the product
    assert equilibrium_torque(22.0, ROW2) == pytest.approx(280.37, abs=0.005)
    no_roll = VehicleParams(1000.0, 0.5, 1.0, 0.3, rolling_coeff=0.0)
    assert equilibrium_torque(0.0, no_roll) == 0.0


def test_step_balanced():
    x = step(VehicleState(0.0, 20.0, 149.4), 149.4, SIMPLE, 0.1)
    assert x.position == pytest.approx(2.0, abs=1e-12)
    assert x.velocity == pytest.approx(20.0, abs=1e-12)
    assert x.torque == pytest.approx(149.4, abs=1e-12)


def test_step_coasting():
    x = step(VehicleState(0.0, 20.0, 0.0), 0.0, SIMPLE, 0.1)
    assert x.position == pytest.approx(2.0, abs=1e-12)
    assert x.velocity == pytest.approx(19.9502, abs=1e-12)
    assert x.torque == 0.0


def test_step_input_equal_to_torque_keeps_torque():
    x = step(VehicleState(5.0, 13.0, 321.0), 321.0, ROW2, 0.1)
    assert x.torque == 321.0


def test_rollout():
    x0 = VehicleState(0.0, 20.0, 149.4)
    assert rollout(x0, [], SIMPLE, 0.1) == [x0]
    states = rollout(x0, [149.4, 0.0], SIMPLE, 0.1)
    assert states[1] == step(x0, 149.4, SIMPLE, 0.1)
    assert states[2] == step(states[1], 0.0, SIMPLE, 0.1)


def test_rollout_array_matches_step_bit_for_bit():
    rng = np.random.default_rng(0)
    u = rng.uniform(-500, 800, 25)
    x0 = VehicleState(-40.0, 19.3, 180.0)
    ref = np.array(rollout(x0, u, ROW2, 0.1))
    assert np.array_equal(rollout_array(x0, u, ROW2, 0.1), ref)


def test_equilibrium_rollout():
    v = 20.0
    h = equilibrium_torque(v, ROW1)
    states = rollout(VehicleState(0.0, v, h), [h] * 10, ROW1, 0.1)
    assert all(abs(x.velocity - v) < 1e-12 for x in states)
    assert np.allclose(np.diff([x.position for x in states]), v * 0.1, atol=1e-12)


def test_output_of():
    assert output_of(VehicleState(2.0, 20.0, 149.4)) == Output(2.0, 20.0)
    assert output_of(VehicleState(0.0, 0.0, 0.0)) == Output(0.0, 0.0)


def test_input_bounds():
    b = input_bounds(ROW1, 20.0)
    assert isinstance(b, InputBounds)
    assert b.u_max == pytest.approx(2013.51, abs=0.005)
    assert b.u_min == pytest.approx(-1715.01, abs=0.005)


def test_input_bounds_zero_acceleration():
    p = VehicleParams(1035.7, 0.51, 0.99, 0.30, accel_max=1e-300)
    assert input_bounds(p, 20.0).u_max == pytest.approx(equilibrium_torque(20.0, p), rel=1e-12)


def test_input_bounds_rejects_negative_speed():
    with pytest.raises(ValueError):
        input_bounds(ROW1, -1.0)


def test_nan_is_not_hidden():
    x = step(VehicleState(0.0, 20.0, 100.0), math.nan, ROW1, 0.1)
    assert math.isnan(x.torque)
