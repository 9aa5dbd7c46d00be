"""Command-line entry points.

Every subcommand writes its artifacts plus a ``<command>.sidecar.json`` into
``--out``. Settings resolve as flags > ``--config`` JSON > defaults. Exit
status: 0 success, 2 usage or config error, 1 runtime failure (a
``<command>.error.json`` diagnostic is written to ``--out``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, fields

from . import __version__, core, gp, pipeline, sqp
from .errors import InvalidArgument
from .ocp import OcpConfig
from .plant import PlantParams
from .simulate import RunLog, SimConfig, closed_loop_simulate, config_hash
from .track import DEFAULT_SEGMENTS, Track, default_track, make_synthetic_track

CONFIG_SECTIONS = ("track", "plant", "ocp", "train", "dataset", "record", "reduce", "simulate")
RUN = "run"
MODELS = "models"
SOD = "sod"
TRACK_FILE = "track.csv"


class ConfigError(Exception):
    """Unreadable or inconsistent configuration (exit status 2)."""


# --- configuration ------------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, overrides, section):
    names = {f.name for f in fields(cls)}
    bad = set(overrides) - names
    if bad:
        raise ConfigError(f"[{section}] unknown keys: {sorted(bad)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    try:
        return cls(**kw)
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _setting(args, name, cfg, section, key, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(section, {}).get(key, default)


def plant_params(cfg):
    return _build(PlantParams, cfg.get("plant", {}), "plant")


def ocp_config(cfg):
    return _build(OcpConfig, cfg.get("ocp", {}), "ocp")


def train_config(cfg, seed):
    return _build(gp.TrainConfig, {"seed": seed, **cfg.get("train", {})}, "train")


def resolve_track(args, cfg):
    path = getattr(args, "track", None) or cfg.get("track", {}).get("path")
    if path:
        try:
            return Track.load(path)
        except OSError as exc:
            raise ConfigError(f"cannot read track {path}: {exc}") from exc
    spec = cfg.get("track", {})
    if "segments" in spec:
        return make_synthetic_track(spec["segments"], spec.get("half_width", 2.0), spec.get("half_width", 2.0),
                                    spec.get("closed", True))
    return default_track()


# --- artifacts ------------------------------------------------------------------------

def _out(args, name):
    return os.path.join(args.out, name)


def write_sidecar(args, command, cfg, extra=None):
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    sidecar = {
        "command": command,
        "version": __version__,
        "backend": core.BACKEND,
        "seed": args.seed,
        "settings": settings,
        "config_hash": config_hash({"config": cfg, "settings": settings}),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **(extra or {}),
    }
    with open(_out(args, f"{command}.sidecar.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def _models_prefix(path):
    """Accept an output directory or an explicit prefix."""
    return os.path.join(path, MODELS) if os.path.isdir(path) else path


def _sod_prefix(path):
    return os.path.join(path, SOD) if os.path.isdir(path) else path


def _run_prefix(path):
    return os.path.join(path, RUN) if os.path.isdir(path) else path


def load_blackbox(models_path, sod_path=None, threshold=1.0):
    models = pipeline.TrainedModels.load(_models_prefix(models_path))
    sod = _sod_prefix(sod_path or models_path)
    if os.path.exists(f"{sod}.lateral.json"):
        reduced = pipeline.ReducedModels.load(sod, models)
    else:
        reduced = pipeline.reduce_models(models, threshold)
    return models, reduced


def build_controller(kind, track, params, ocp_cfg, models_path=None, sod_path=None):
    if kind == "nominal":
        return sqp.nominal_controller(track, params, ocp_cfg)
    if models_path is None:
        raise ConfigError("--controller blackbox needs --models")
    models, reduced = load_blackbox(models_path, sod_path)
    cfg = pipeline.blackbox_config(models.lateral.dataset, ocp_cfg)
    return sqp.blackbox_controller(track, reduced.lateral, reduced.yaw, cfg)


# --- commands ---------------------------------------------------------------------

def cmd_generate_track(args, cfg):
    spec = dict(cfg.get("track", {}))
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read track spec {args.spec}: {exc}") from exc
    segments = spec.get("segments", [dict(s) for s in DEFAULT_SEGMENTS])
    width = float(_setting(args, "half_width", {"track": spec}, "track", "half_width", 2.0))
    track = make_synthetic_track(segments, width, width, spec.get("closed", True))
    track.save(_out(args, TRACK_FILE))
    write_sidecar(args, "generate-track", cfg, {"length": track.length, "segments": segments})
    return f"track length {track.length:.2f} m -> {_out(args, TRACK_FILE)}"


def cmd_record(args, cfg):
    track = resolve_track(args, cfg)
    params = plant_params(cfg)
    laps = int(_setting(args, "laps", cfg, "record", "laps", 10))
    driver = _setting(args, "driver", cfg, "record", "driver", "nominal")
    dither = _setting(args, "dither", cfg, "record", "dither", list(pipeline.DEFAULT_DITHER))
    noise = float(_setting(args, "noise", cfg, "record", "noise", 0.0))
    if driver == "excitation":
        dither = None
    log = pipeline.record_run(driver, params, track, laps=laps, noise=noise, seed=args.seed,
                              ocp_config=ocp_config(cfg), dither=dither)
    log.save(_out(args, RUN))
    write_sidecar(args, "record", cfg, {"termination": log.meta.get("termination"), "lap_times": log.lap_times})
    return f"{len(log)} samples, laps {[round(t, 2) for t in log.lap_times]} ({log.meta.get('termination')})"


def cmd_train(args, cfg):
    log = RunLog.load(_run_prefix(args.log))
    held = int(_setting(args, "held_out", cfg, "dataset", "held_out", 0))
    max_points = int(_setting(args, "max_points", cfg, "dataset", "max_points", pipeline.MAX_POINTS))
    laps = pipeline.split_laps(log, held)[0] if held else None
    ds_lat, ds_yaw = pipeline.assemble_dataset(log, laps=laps, max_points=max_points)
    models = pipeline.train_models(ds_lat, ds_yaw, train_config(cfg, args.seed))
    models.save(_out(args, MODELS))
    write_sidecar(args, "train", cfg, {
        "points": len(ds_lat),
        "lengthscales": {"lateral": models.lateral.params.lengthscales.tolist(),
                         "yaw": models.yaw.params.lengthscales.tolist()},
    })
    return f"trained on {len(ds_lat)} points -> {_out(args, MODELS)}.*.json"


def cmd_reduce(args, cfg):
    models = pipeline.TrainedModels.load(_models_prefix(args.models))
    threshold = float(_setting(args, "threshold", cfg, "reduce", "threshold", 1.0))
    reduced = pipeline.reduce_models(models, threshold)
    reduced.save(_out(args, SOD))
    write_sidecar(args, "reduce", cfg, {"sizes": list(reduced.sizes())})
    return f"SoD sizes lateral {reduced.sizes()[0]}, yaw {reduced.sizes()[1]}"


def cmd_simulate(args, cfg):
    track = resolve_track(args, cfg)
    params = plant_params(cfg)
    kind = _setting(args, "controller", cfg, "simulate", "controller", "nominal")
    laps = int(_setting(args, "laps", cfg, "simulate", "laps", 3))
    ctrl = build_controller(kind, track, params, ocp_config(cfg), args.models, args.sod)
    sim = SimConfig(laps=laps, seed=args.seed,
                    start_speed=float(cfg.get("simulate", {}).get("start_speed", 5.0)))
    log = closed_loop_simulate(ctrl, params, track, sim, {"controller": kind})
    log.save(_out(args, RUN))
    write_sidecar(args, "simulate", cfg, {"termination": log.meta.get("termination"), "lap_times": log.lap_times})
    if log.meta.get("termination") != "laps-complete":
        raise RuntimeError(f"run ended early: {log.meta.get('termination')}")
    return f"{kind}: laps {[round(t, 2) for t in log.lap_times]}"


def _named(spec):
    name, sep, path = spec.partition("=")
    if not sep:
        name, path = os.path.basename(os.path.normpath(spec)), spec
    return name, _run_prefix(path)


def cmd_evaluate(args, cfg):
    track = resolve_track(args, cfg)
    logs = dict(_named(s) for s in args.log)
    logs = {k: RunLog.load(v) for k, v in logs.items()}
    models = reduced = held = None
    if args.models:
        models, reduced = load_blackbox(args.models, args.sod)
        if args.data:
            data = RunLog.load(_run_prefix(args.data))
            held_laps = pipeline.split_laps(data, int(_setting(args, "held_out", cfg, "dataset", "held_out", 1)))[1]
            held = pipeline.assemble_dataset(data, laps=held_laps)
    report = pipeline.evaluate_runs(logs, track, models, reduced, held, plant_params(cfg))
    report.save(_out(args, "report"))
    write_sidecar(args, "evaluate", cfg)
    return json.dumps({"lap_times": report.lap_times, "one_step": report.one_step}, default=float)


COMMANDS = {
    "generate-track": cmd_generate_track,
    "record": cmd_record,
    "train": cmd_train,
    "reduce": cmd_reduce,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


# --- parser ----------------------------------------------------------------------------

def _triple(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if len(vals) != 3 or min(vals) < 0:
        raise argparse.ArgumentTypeError("expected three non-negative numbers a,b,c")
    return vals


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a u64")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--laps", type=_positive_int)
    common.add_argument("--controller", choices=("nominal", "blackbox"))

    p = argparse.ArgumentParser(prog="lbnmpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-track", parents=[common], help="build a track file")
    g.add_argument("--spec", help="JSON with 'segments' (and optional 'half_width')")
    g.add_argument("--half-width", type=float)

    r = sub.add_parser("record", parents=[common], help="record a training run")
    r.add_argument("--track")
    r.add_argument("--driver", choices=("nominal", "excitation"))
    r.add_argument("--dither", type=_triple, help="command dither std a,b,c (gamma, beta, tau)")
    r.add_argument("--noise", type=float)

    t = sub.add_parser("train", parents=[common], help="fit GP models to a recorded run")
    t.add_argument("--log", required=True, help="run directory or prefix")
    t.add_argument("--held-out", type=int)
    t.add_argument("--max-points", type=_positive_int)

    d = sub.add_parser("reduce", parents=[common], help="subset-of-data reduction")
    d.add_argument("--models", required=True, help="train output directory or prefix")
    d.add_argument("--threshold", type=float, help="variance threshold factor on sigma_n^2")

    s = sub.add_parser("simulate", parents=[common], help="closed-loop run")
    s.add_argument("--track")
    s.add_argument("--models", help="trained models (blackbox)")
    s.add_argument("--sod", help="reduce output (defaults to --models location)")

    e = sub.add_parser("evaluate", parents=[common], help="metrics report")
    e.add_argument("--log", action="append", required=True, help="NAME=run dir or prefix; repeatable")
    e.add_argument("--track")
    e.add_argument("--models")
    e.add_argument("--sod")
    e.add_argument("--data", help="recorded run whose held-out laps give acceleration RMSE")
    e.add_argument("--held-out", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        parser.error(str(exc))
    os.makedirs(args.out, exist_ok=True)
    try:
        msg = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure gets a diagnostic
        path = os.path.join(args.out, f"{args.command}.error.json")
        with open(path, "w") as fh:
            json.dump({
                "command": args.command,
                "error": type(exc).__name__,
                "message": str(exc),
                "traceback": traceback.format_exc(),
                "settings": {k: v for k, v in vars(args).items() if k != "func"},
            }, fh, indent=1, default=str)
        print(f"lbnmpc {args.command}: {type(exc).__name__}: {exc} (see {path})", file=sys.stderr)
        return 1
    print(msg)
    return 0
