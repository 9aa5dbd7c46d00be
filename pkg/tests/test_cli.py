import json

import pytest

from lbnmpc import cli
from lbnmpc.simulate import RunLog
from lbnmpc.track import Track


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_parse_errors_exit_2(tmp_path):
    for argv in (["simulate", "--controller", "fast"], ["record", "--seed", "-1"], ["record", "--laps", "0"],
                 ["record", "--dither", "1,2"], ["bogus"], []):
        with pytest.raises(SystemExit) as exc:
            run(*argv)
        assert exc.value.code == 2


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"ocp": {"nonsense": 1}}))
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--config", bad, "--out", tmp_path)
    assert exc.value.code == 2
    bad.write_text("{not json")
    with pytest.raises(SystemExit) as exc:
        run("generate-track", "--config", bad, "--out", tmp_path)
    assert exc.value.code == 2


def test_blackbox_without_models_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--controller", "blackbox", "--out", tmp_path)
    assert exc.value.code == 2


def test_runtime_failure_exits_1_with_diagnostic(tmp_path):
    assert run("train", "--log", tmp_path / "missing", "--out", tmp_path) == 1
    diag = json.loads((tmp_path / "train.error.json").read_text())
    assert diag["command"] == "train" and diag["error"] == "FileNotFoundError"


def test_generate_track(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"segments": [{"arc": 10.0, "angle": 360.0}]}))
    assert run("generate-track", "--spec", spec, "--half-width", 1.5, "--out", tmp_path) == 0
    t = Track.load(tmp_path / "track.csv")
    assert t.half_width_left[0] == 1.5 and t.length == pytest.approx(20 * 3.141592653589793)
    side = json.loads((tmp_path / "generate-track.sidecar.json").read_text())
    assert side["seed"] == 0 and len(side["config_hash"]) == 64


def test_record_train_reduce_evaluate(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 3}, "dataset": {"max_points": 120}}))
    rec, mod, red, ev = (tmp_path / n for n in ("rec", "mod", "red", "ev"))
    assert run("record", "--driver", "excitation", "--laps", 2, "--seed", 5, "--out", rec) == 0
    log = RunLog.load(rec / "run")
    assert len(log.lap_times) == 2
    assert run("train", "--log", rec, "--held-out", 1, "--config", cfg, "--out", mod) == 0
    side = json.loads((mod / "train.sidecar.json").read_text())
    assert side["points"] <= 120
    assert run("reduce", "--models", mod, "--threshold", 1.0, "--out", red) == 0
    assert json.loads((red / "reduce.sidecar.json").read_text())["sizes"][0] > 0
    assert run("evaluate", "--log", f"scripted={rec}", "--models", mod, "--sod", red, "--data", rec,
               "--out", ev) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["lap_times"]["scripted"] == log.lap_times
    assert set(report["rmse"]) == {"nominal", "full", "sod", "nn"}


def test_simulate_nominal_one_lap(tmp_path):
    assert run("simulate", "--controller", "nominal", "--laps", 1, "--out", tmp_path) == 0
    log = RunLog.load(tmp_path / "run")
    assert log.meta["termination"] == "laps-complete" and len(log.lap_times) == 1
    assert (tmp_path / "simulate.sidecar.json").exists()


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "lbnmpc", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
