import json

import numpy as np
import pytest

from lbnmpc import gp, pipeline as pl, plant, track as tr
from lbnmpc.errors import InvalidArgument
from lbnmpc.simulate import RunLog

TRACK = tr.default_track()
PARAMS = plant.PlantParams()


@pytest.fixture(scope="module")
def short_log():
    return pl.record_run("excitation", PARAMS, TRACK, duration=8.0, seed=3)


def test_smoother_reproduces_ramp():
    t = np.arange(200) * 0.01
    x, v = pl.kalman_smooth(3.0 + 2.0 * t, 0.01)
    np.testing.assert_allclose(x, 3.0 + 2.0 * t, atol=1e-9)
    np.testing.assert_allclose(v, 2.0, atol=1e-7)


def test_smoother_time_reversal(rng):
    z = rng.normal(size=150).cumsum()
    x, v = pl.kalman_smooth(z, 0.01)
    xr, vr = pl.kalman_smooth(z[::-1], 0.01)
    np.testing.assert_allclose(xr[::-1], x, atol=1e-9)
    np.testing.assert_allclose(vr[::-1], -v, atol=1e-6)


def test_smoother_reduces_noise(rng):
    t = np.arange(1000) * 0.01
    truth = np.sin(t)
    z = truth + 0.05 * rng.normal(size=t.size)
    x, v = pl.kalman_smooth(z, t)
    assert np.sqrt(np.mean((x - truth) ** 2)) < 0.5 * 0.05
    assert np.sqrt(np.mean((v[50:-50] - np.cos(t[50:-50])) ** 2)) < 0.2


def test_filter_is_causal(rng):
    z = rng.normal(size=80)
    a, _ = pl.kalman_filter(z, 0.01)
    z2 = z.copy()
    z2[60:] += 5.0
    b, _ = pl.kalman_filter(z2, 0.01)
    np.testing.assert_array_equal(a[:60], b[:60])


def test_nonuniform_timestamps_rejected():
    with pytest.raises(InvalidArgument):
        pl.kalman_smooth([1.0, 2.0, 3.0], np.array([0.0, 0.01, 0.03]))


def test_recording_and_dataset(short_log):
    assert short_log.meta["termination"] == "max-time"
    assert len(short_log) == pytest.approx(800, abs=2)
    lat, yaw = pl.assemble_dataset(short_log, max_points=100)
    assert len(lat) <= 100 and len(lat) == len(yaw)
    np.testing.assert_array_equal(lat.inputs, yaw.inputs)
    # logged accelerations are the plant's own
    s = short_log.samples
    k = 123
    st = plant.PlantState(s["X"][k], s["Y"][k], s["psi"][k], s["vx"][k], s["vy"][k], s["yaw_rate"][k],
                          s["gamma_act"][k], s["beta_act"][k], s["tau_act"][k])
    assert plant.plant_accelerations(st, PARAMS) == pytest.approx((s["vy_dot"][k], s["yaw_acc"][k]))


def test_smooth_log_keeps_shape(short_log):
    sm = pl.smooth_log(short_log)
    assert sm.meta["smoothed"] and len(sm) == len(short_log)
    assert np.max(np.abs(sm.samples["vy"] - short_log.samples["vy"])) < 0.05


def test_log_save_load(short_log, tmp_path):
    short_log.save(tmp_path / "run")
    back = RunLog.load(tmp_path / "run")
    np.testing.assert_allclose(back.samples["vy"], short_log.samples["vy"])
    assert back.meta["driver"] == "excitation"


def test_zero_duration_run():
    log = pl.record_run("excitation", PARAMS, TRACK, duration=0.0)
    assert len(log) == 0 and log.meta["termination"] == "zero-duration"


def test_dither_statistics():
    class Zero:
        def step(self, m, s):
            return np.zeros(3)

    d = pl.DitheredDriver(Zero(), sigma=(0.2, 0.03, 0.1), seed=4)
    out = np.array([d.step(None, 0.0) for _ in range(20000)])
    np.testing.assert_allclose(out.std(axis=0), [0.2, 0.03, 0.1], rtol=0.1)
    d.reset()
    np.testing.assert_array_equal(d.step(None, 0.0), out[0])


def test_split_laps():
    log = RunLog.empty({"lap_times": [20.0, 19.0, 19.5]})
    assert pl.split_laps(log, 1) == ([0, 1], [2])
    with pytest.raises(InvalidArgument):
        pl.split_laps(log, 3)


def _steps(e_y, eta, s=10.0):
    log = RunLog.empty()
    log.steps["s"] = np.full(len(e_y), s)
    log.steps["e_y"] = np.asarray(e_y, dtype=float)
    log.steps["eta"] = np.asarray(eta, dtype=float)
    return log


def test_eta_check():
    assert pl.eta_check(_steps([0.0, 1.6, -1.7], [0.0, -0.1, 0.2]), TRACK) == (2, 0, pytest.approx(0.2))
    assert pl.eta_check(_steps([1.6, -1.7], [0.1, 0.0]), TRACK)[1] == 2


def test_report_schema(short_log, tmp_path):
    lat, yaw = pl.assemble_dataset(short_log, max_points=60)
    models = pl.train_models(lat, yaw, gp.TrainConfig(epochs=3))
    red = pl.reduce_models(models)
    rep = pl.evaluate_runs({"scripted": short_log}, TRACK, models, red, (lat, yaw), PARAMS)
    assert set(rep.rmse) == {"nominal", "full", "sod", "nn"}
    assert rep.rmse["nominal"]["vy_dot"] < 1e-9
    rep.save(tmp_path / "report")
    d = json.loads((tmp_path / "report.json").read_text())
    assert set(d) == {"rmse", "one_step", "lap_times", "bounds", "meta"}
    head = (tmp_path / "report.long.csv").read_text().splitlines()[0]
    assert head == "variable,index,value,run"
    models.save(tmp_path / "m")
    back = pl.TrainedModels.load(tmp_path / "m")
    red.save(tmp_path / "sod")
    red2 = pl.ReducedModels.load(tmp_path / "sod", back)
    assert red2.sizes() == red.sizes()


def test_negative_report_values_rejected():
    with pytest.raises(InvalidArgument):
        pl.EvalReport(lap_times={"a": [-1.0]}).check()


def test_blackbox_config_bounds_steering(short_log):
    lat, _ = pl.assemble_dataset(short_log)
    cfg = pl.blackbox_config(lat)
    beta = np.abs(lat.inputs[:, 4])
    assert cfg.stage_ub[3] == pytest.approx(min(np.quantile(beta, 0.99) + 0.05, 0.5))
    assert cfg.stage_lb[3] == -cfg.stage_ub[3]
    assert cfg.stage_ub[:3] == pl.OcpConfig().stage_ub[:3]
