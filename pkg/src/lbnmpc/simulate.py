"""Closed-loop simulation of a controller against the plant, and the run log."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import plant as plantmod
from .dynamics import VehicleState
from .errors import InvalidArgument, LbnmpcError, LocalizationError, PlantStall
from .track import bounds_at, global_to_frenet

PLANT_RATE = 200.0
LOG_RATE = 100.0

SAMPLE_COLUMNS = (
    "t", "X", "Y", "psi", "vx", "vy", "yaw_rate", "gamma_act", "beta_act", "tau_act",
    "gamma_cmd", "beta_cmd", "tau_cmd", "vy_dot", "yaw_acc", "s", "e_y", "e_theta", "lap",
)
STEP_COLUMNS = (
    "t", "s", "e_y", "e_theta", "vx", "vy", "yaw_rate", "gamma_cmd", "beta_cmd", "tau_cmd",
    "solve_time_ms", "kkt_stationarity", "kkt_max", "qp_iters", "degraded", "failed", "cold_start",
    "eta", "pred_vx", "pred_vy", "pred_yaw_rate",
)


def config_hash(obj):
    """SHA-256 over canonical JSON."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if hasattr(v, "__dict__"):
        return vars(v)
    raise TypeError(type(v))


@dataclass
class RunLog:
    """100 Hz samples, 20 Hz controller steps and metadata."""

    samples: dict
    steps: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, meta=None):
        return cls({c: np.zeros(0) for c in SAMPLE_COLUMNS}, {c: np.zeros(0) for c in STEP_COLUMNS}, dict(meta or {}))

    def __len__(self):
        return int(self.samples["t"].size)

    @property
    def lap_times(self):
        return list(self.meta.get("lap_times", []))

    def save(self, prefix):
        """Write ``prefix.csv``, ``prefix.steps.csv`` and ``prefix.meta.json``."""
        _save_table(f"{prefix}.csv", self.samples, SAMPLE_COLUMNS)
        _save_table(f"{prefix}.steps.csv", self.steps, STEP_COLUMNS)
        with open(f"{prefix}.meta.json", "w") as fh:
            json.dump(self.meta, fh, indent=1, sort_keys=True, default=_jsonable)

    @classmethod
    def load(cls, prefix):
        with open(f"{prefix}.meta.json") as fh:
            meta = json.load(fh)
        return cls(_load_table(f"{prefix}.csv", SAMPLE_COLUMNS), _load_table(f"{prefix}.steps.csv", STEP_COLUMNS), meta)

    def laps_slice(self, lap_ids):
        """Sample rows belonging to the given lap indices."""
        mask = np.isin(self.samples["lap"].astype(int), list(lap_ids))
        return {k: v[mask] for k, v in self.samples.items()}


def _save_table(path, table, cols):
    data = np.column_stack([np.asarray(table[c], dtype=float) for c in cols]) if len(table[cols[0]]) else np.zeros((0, len(cols)))
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def _load_table(path, cols):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != tuple(cols):
        raise InvalidArgument(f"{path}: unexpected columns")
    d = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if d.size == 0:
        return {c: np.zeros(0) for c in cols}
    return {c: np.ascontiguousarray(d[:, k]) for k, c in enumerate(cols)}


@dataclass(frozen=True)
class SimConfig:
    laps: int = 3
    max_time: float = 0.0  # 0: derived from laps
    start_s: float = 0.0
    start_speed: float = 5.0
    noise_std: tuple = (0.0, 0.0, 0.0)  # measurement noise on (vx, vy, yaw_rate)
    seed: int = 0
    control_rate: float = 20.0
    plant_rate: float = PLANT_RATE
    log_rate: float = LOG_RATE

    def __post_init__(self):
        if self.laps < 0:
            raise InvalidArgument("laps must be >= 0")
        if self.plant_rate % self.control_rate or self.plant_rate % self.log_rate:
            raise InvalidArgument("plant rate must be a multiple of control and log rates")


def initial_state(track, s0=0.0, speed=5.0):
    X, Y, h = track.pose_at(s0)
    return plantmod.PlantState(X, Y, h, speed, 0.0, 0.0)


def lap_crossings(t, s_unwrapped, length, s0=0.0):
    """Times at which the unwrapped arc length crosses ``s0 + k * length``."""
    out = []
    k = 1
    for i in range(1, len(t)):
        while s_unwrapped[i] >= s0 + k * length > s_unwrapped[i - 1]:
            target = s0 + k * length
            w = (target - s_unwrapped[i - 1]) / (s_unwrapped[i] - s_unwrapped[i - 1])
            out.append(t[i - 1] + w * (t[i] - t[i - 1]))
            k += 1
    return out


def closed_loop_simulate(controller, plant_params, track, config=SimConfig(), meta=None):
    """Drive ``controller`` (``step(measured, s_unwrapped) -> commands``)
    against the plant. Failures end the run; the partial log is returned with
    the reason in ``meta['termination']``."""
    rng = np.random.default_rng(config.seed)
    dt = 1.0 / config.plant_rate
    per_ctrl = int(round(config.plant_rate / config.control_rate))
    per_log = int(round(config.plant_rate / config.log_rate))
    max_time = config.max_time or (config.laps * track.length / 3.0 + 10.0)
    n_plant = int(round(max_time * config.plant_rate))

    state = initial_state(track, config.start_s, config.start_speed)
    s_w, e_y, e_th = global_to_frenet(track, state.X, state.Y, state.psi)
    s_unw = config.start_s
    cmds = np.zeros(3)
    if hasattr(controller, "reset"):
        controller.reset()
    samples = {c: [] for c in SAMPLE_COLUMNS}
    steps = {c: [] for c in STEP_COLUMNS}
    termination = "max-time"
    crossings = []
    noise = np.asarray(config.noise_std, dtype=float)
    try:
        for k in range(n_plant + 1):
            t = k * dt
            if k:
                s_new, e_y, e_th = global_to_frenet(track, state.X, state.Y, state.psi, s_hint=s_w)
                ds = s_new - s_w
                if ds < -0.5 * track.length:
                    ds += track.length
                elif ds > 0.5 * track.length:
                    ds -= track.length
                s_prev_unw = s_unw
                s_unw += ds
                s_w = s_new
                crossings += lap_crossings([t - dt, t], [s_prev_unw, s_unw], track.length,
                                           config.start_s + len(crossings) * track.length)[:1]
                if config.laps and len(crossings) >= config.laps:
                    _log_sample(samples, t, state, cmds, plant_params, s_w, e_y, e_th, len(crossings))
                    termination = "laps-complete"
                    break
            if k % per_ctrl == 0:
                meas = np.array([state.vx, state.vy, state.yaw_rate])
                if np.any(noise > 0):
                    meas = meas + noise * rng.standard_normal(3)
                vs = VehicleState(meas[0], meas[1], meas[2], e_th, e_y)
                cmds = np.asarray(controller.step(vs, s_unw), dtype=float)
                _log_step(steps, t, s_unw, e_y, e_th, state, cmds, getattr(controller, "state", None))
            if k % per_log == 0:
                _log_sample(samples, t, state, cmds, plant_params, s_w, e_y, e_th, len(crossings))
            if k == n_plant:
                break
            state = plantmod.plant_step(state, cmds, plant_params, dt)
    except PlantStall as exc:
        termination = f"plant-stall: {exc}"
    except LocalizationError as exc:
        termination = f"localization: {exc}"
    except LbnmpcError as exc:
        termination = f"controller: {type(exc).__name__}: {exc}"
    m = dict(meta or {})
    m.update(
        termination=termination,
        lap_times=[float(b - a) for a, b in zip([0.0] + crossings[:-1], crossings)],
        lap_crossings=[float(c) for c in crossings],
        seed=int(config.seed),
        controller=getattr(controller, "name", type(controller).__name__),
        track_length=track.length,
        sim_config=config_hash(vars(config)),
        plant_config=config_hash(vars(plant_params)),
    )
    return RunLog({c: np.asarray(v, dtype=float) for c, v in samples.items()},
                  {c: np.asarray(v, dtype=float) for c, v in steps.items()}, m)


def _log_sample(samples, t, state, cmds, params, s, e_y, e_th, lap):
    vy_dot, yaw_acc = plantmod.plant_accelerations(state, params)
    row = (t, state.X, state.Y, state.psi, state.vx, state.vy, state.yaw_rate, state.gamma_act,
           state.beta_act, state.tau_act, cmds[0], cmds[1], cmds[2], vy_dot, yaw_acc, s, e_y, e_th, lap)
    for c, v in zip(SAMPLE_COLUMNS, row):
        samples[c].append(v)


def _log_step(steps, t, s, e_y, e_th, state, cmds, cstate):
    d = getattr(cstate, "diagnostics", None)
    g = (lambda name, default=math.nan: getattr(d, name, default)) if d is not None else (lambda name, default=math.nan: default)
    row = (t, s, e_y, e_th, state.vx, state.vy, state.yaw_rate, cmds[0], cmds[1], cmds[2],
           g("solve_time_ms"), g("kkt_stationarity"), g("kkt_max"), g("qp_iters", 0), float(g("degraded", False)),
           float(g("failed", False)), float(g("cold_start", False)), g("eta", 0.0), g("pred_vx"), g("pred_vy"),
           g("pred_yaw_rate"))
    for c, v in zip(STEP_COLUMNS, row):
        steps[c].append(float(v))


def track_violations(log, track):
    """Per-sample (excess over the raw bound, excess over the reduced bound)."""
    raw, red = [], []
    for s, ey in zip(log.samples["s"], log.samples["e_y"]):
        lb, ub = bounds_at(track, s)
        raw.append(max(0.0, ey - ub, lb - ey))
        red.append(max(0.0, ey - (ub - 0.5), (lb + 0.5) - ey))
    return np.array(raw), np.array(red)
