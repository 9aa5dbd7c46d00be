import math

import numpy as np
import pytest

from lbnmpc import plant
from lbnmpc.errors import InvalidArgument, PlantStall

P = plant.PlantParams()


def test_straight_driving_stays_straight():
    s = plant.PlantState(0.0, 0.0, 0.0, 8.0, 0.0, 0.0)
    for _ in range(100):
        s = plant.plant_step(s, [0.0, 0.0, 0.0], P, 0.01)
    assert s.X == pytest.approx(8.0) and abs(s.Y) < 1e-12 and s.vx == pytest.approx(8.0)


def test_actuator_lag_first_order():
    s = plant.PlantState(0.0, 0.0, 0.0, 8.0, 0.0, 0.0)
    dt, n = 0.005, 24
    for _ in range(n):
        s = plant.plant_step(s, [1.0, 0.0, 0.0], P, dt)
    assert s.gamma_act == pytest.approx(1.0 - math.exp(-dt * n / P.lag_gamma), rel=1e-6)


def test_zero_lag_applies_commands_directly():
    q = P.without_lag()
    s = plant.plant_step(plant.PlantState(0, 0, 0, 8.0, 0, 0), [0.5, 0.1, 2.0], q, 0.01)
    assert (s.gamma_act, s.beta_act, s.tau_act) == (0.5, 0.1, 2.0)


def test_steering_saturates():
    assert plant.wheel_angle(10.0, P) == pytest.approx(P.steer_limit)
    assert plant.wheel_angle(1e-4, P) == pytest.approx(1e-4)
    lin = plant.PlantParams(steer_limit=0.0)
    assert plant.wheel_angle(3.0, lin) == 3.0


def test_lateral_force_bounded_by_friction():
    for beta in np.linspace(-1.5, 1.5, 31):
        fyf, fyr = plant.tire_forces(8.0, 0.0, 0.0, 0.0, beta, P)
        assert abs(fyf) <= P.D_front + 1e-9 and fyr == 0.0


def test_left_steer_turns_left():
    s = plant.PlantState(0.0, 0.0, 0.0, 8.0, 0.0, 0.0, beta_act=0.1)
    vy_dot, yaw_acc = plant.plant_accelerations(s, P)
    assert yaw_acc > 0


def test_torque_vectoring_yaws():
    s = plant.PlantState(0.0, 0.0, 0.0, 8.0, 0.0, 0.0, tau_act=1.0)
    assert plant.plant_accelerations(s, P)[1] == pytest.approx(P.tv_gain / P.yaw_inertia)


def test_nominal_model_matches_plant(backend):
    q = P.without_lag()
    m = plant.NominalModel(q)
    s = plant.PlantState(0.0, 0.0, 0.0, 7.0, 0.2, 0.4, 0.5, 0.08, 0.3)
    xgp = np.array([s.vx, s.vy, s.yaw_rate, s.gamma_act, s.beta_act, s.tau_act])
    np.testing.assert_allclose(m.predict(xgp), plant.plant_accelerations(s, q), rtol=1e-10, atol=1e-10)


def test_stall_and_bad_dt():
    with pytest.raises(PlantStall):
        plant.plant_step(plant.PlantState(0, 0, 0, 0.01, 0, 0), [0, 0, 0], P, 0.01)
    with pytest.raises(InvalidArgument):
        plant.plant_step(plant.PlantState(0, 0, 0, 5.0, 0, 0), [0, 0, 0], P, 0.05)


def test_params_validation_and_json(tmp_path):
    with pytest.raises(InvalidArgument):
        plant.PlantParams(mass=-1.0)
    P.to_json(tmp_path / "p.json")
    assert plant.PlantParams.from_json(tmp_path / "p.json") == P
