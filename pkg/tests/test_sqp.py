import numpy as np
import pytest

from lbnmpc import ocp, plant, qp, sqp, track as tr
from lbnmpc.errors import InvalidArgument

TRACK = tr.default_track()
PARAMS = plant.PlantParams()
CFG = ocp.OcpConfig()


def measured(vx=7.0, e_y=0.1):
    return np.array([vx, 0.0, 0.0, 0.0, e_y, 0.0, 0.0, 0.0, 0.0])


def test_converged_sqp_from_cold_start():
    models = sqp.FixedModels(plant.NominalModel(PARAMS.without_lag())).model
    it = sqp.cold_start(measured(), 5.0, TRACK, CFG)
    # the proximal term makes the Gauss-Newton iteration converge linearly
    res = sqp.sqp_solve(CFG, TRACK, models, it, sqp.SqpSettings(mode="converged", max_iter=60, tol=1e-3))
    assert res.converged
    assert res.step_norms[-1] < 1e-2 * res.step_norms[0]
    assert max(res.kkt) <= 1e-6
    assert np.max(np.abs(ocp.transcribe(CFG, TRACK, models, res.iterate))) <= 1e-4
    assert ocp.constraint_violation(CFG, TRACK, res.iterate) <= 1e-4


def test_rti_step_is_one_qp_full_step(monkeypatch):
    ctrl = sqp.nominal_controller(TRACK, PARAMS)
    calls = []
    real = qp.solve
    monkeypatch.setattr(qp, "solve", lambda *a, **k: calls.append(1) or real(*a, **k))
    cmd = ctrl.step(measured(), 5.0)
    assert len(calls) == 1
    d = ctrl.state.diagnostics
    assert d.cold_start and not d.degraded and d.kkt_max <= 1e-6
    assert cmd.shape == (3,) and np.all(np.isfinite(cmd))
    ctrl.step(measured(), 5.35)
    assert len(calls) == 2 and not ctrl.state.diagnostics.cold_start


def test_failure_budget_then_safe_stop(monkeypatch):
    ctrl = sqp.nominal_controller(TRACK, PARAMS)
    ctrl.step(measured(), 5.0)
    held = ctrl.state.commands.copy()
    real = qp.solve

    def failing(*a, **k):
        sol = real(*a, **k)
        sol.status = qp.MAX_ITER
        return sol

    monkeypatch.setattr(qp, "solve", failing)
    for k in range(sqp.MAX_FAILURES - 1):
        cmd = ctrl.step(measured(), 5.3 + 0.3 * k)
        assert ctrl.state.diagnostics.degraded
        np.testing.assert_array_equal(cmd, held)
    cmd = ctrl.step(measured(), 7.0)
    assert ctrl.state.diagnostics.failed
    assert cmd.tolist() == [CFG.stage_lb[2], 0.0, 0.0]
    monkeypatch.setattr(qp, "solve", real)
    ctrl.step(measured(), 7.3)
    assert ctrl.state.diagnostics.cold_start and ctrl.state.failures == 0


def test_lap_wrap_does_not_cold_start():
    ctrl = sqp.nominal_controller(TRACK, PARAMS)
    ctrl.step(measured(), TRACK.length - 0.2)
    ctrl.step(measured(), TRACK.length + 0.15)
    assert not ctrl.state.diagnostics.cold_start
    ctrl.step(measured(), 1.0)
    assert ctrl.state.diagnostics.cold_start


def test_warm_start_shift_interpolates():
    it = sqp.cold_start(measured(), 0.0, TRACK, CFG)
    it.X[:, 4] = it.s
    it.X[:, 8] = np.linspace(0.0, 3.0, CFG.n_nodes)
    sh = sqp.warm_start_shift(it, 0.45, CFG)
    np.testing.assert_allclose(sh.s, 0.45 + CFG.offsets)
    np.testing.assert_allclose(sh.X[:-1, 4], sh.s[:-1])
    assert sh.X[-1, 4] == it.X[-1, 4]
    assert sh.X[0, 8] == 0.0


def test_rollout_reaches_target_time():
    models = [plant.NominalModel(PARAMS.without_lag())] * (CFG.n_nodes - 1)
    it = sqp.cold_start(measured(), 0.0, TRACK, CFG)
    x = sqp.rollout_until(it.x0_bar, it.U, it.s, models, TRACK, 0.05)
    assert x[8] == pytest.approx(0.05)
    assert x[4] == pytest.approx(0.1, abs=1e-3)


def test_nonfinite_measurement_rejected():
    ctrl = sqp.nominal_controller(TRACK, PARAMS)
    bad = measured()
    bad[1] = np.nan
    with pytest.raises(InvalidArgument):
        ctrl.step(bad, 0.0)


def test_settings_validation():
    with pytest.raises(InvalidArgument):
        sqp.SqpSettings(mode="fast")
    with pytest.raises(InvalidArgument):
        sqp.SqpSettings(max_iter=0)
