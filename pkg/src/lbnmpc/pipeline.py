"""Data acquisition, smoothing, dataset assembly, training and evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gp, reduce, sqp
from .errors import InvalidArgument
from .ocp import OcpConfig
from .plant import NominalModel, PlantParams
from .simulate import RunLog, SimConfig, closed_loop_simulate, config_hash, track_violations
from .track import bounds_at, curvature_at

MAX_POINTS = 5000
# GP regressors [vx, vy, yaw_rate, gamma, beta, tau_v]; the plant's actuator
# states are what the accelerations actually respond to
INPUT_COLUMNS = ("vx", "vy", "yaw_rate", "gamma_act", "beta_act", "tau_act")
TARGET_COLUMNS = ("vy_dot", "yaw_acc")
# command dither (gamma, beta, tau_v) for recordings behind the nominal
# controller; without it the inputs are a function of the state and the
# GPs never see off-policy steering
DEFAULT_DITHER = (0.2, 0.03, 0.1)


# --- drivers --------------------------------------------------------------------

class ExcitationDriver:
    """Scripted stand-in for a human driver: centerline tracking with a
    sinusoidal steering overlay and a slow speed sweep."""

    name = "excitation"

    def __init__(self, track, plant_params=PlantParams(), seed=0, speed_range=(4.0, 9.0),
                 sweep_period=14.0, steer_amplitude=0.06, rate=20.0, lat_accel=4.0, brake=2.0, yaw_damping=0.1):
        self.track = track
        self.wheelbase = plant_params.wheelbase
        self.speed_range = speed_range
        self.sweep_period = sweep_period
        self.steer_amplitude = steer_amplitude
        self.period = 1.0 / rate
        self.lat_accel = lat_accel
        self.brake = brake
        self.yaw_damping = yaw_damping
        rng = np.random.default_rng(seed)
        self.freqs = rng.uniform(0.3, 1.2, size=2)
        self.phases = rng.uniform(0.0, 2 * math.pi, size=3)
        self.state = None
        self.reset()

    def reset(self):
        self.t = 0.0

    def _speed_limit(self, s, vx):
        # brake early enough to reach the cornering speed of every point ahead
        d = np.arange(0.0, 30.0, 0.5)
        z = np.array([abs(curvature_at(self.track, s + dk)) for dk in d])
        with np.errstate(divide="ignore"):
            v2 = np.where(z > 1e-9, self.lat_accel / z, np.inf) + 2.0 * self.brake * d
        return math.sqrt(v2.min())

    def step(self, measured, s_now):
        m = measured
        lo, hi = self.speed_range
        ph = 2 * math.pi * self.t / self.sweep_period + self.phases[2]
        v_ref = min(0.5 * (lo + hi) + 0.5 * (hi - lo) * math.sin(ph), self._speed_limit(s_now, m.vx))
        gamma = float(np.clip(1.5 * (v_ref - m.vx), -4.0, 2.0))
        wave = sum(math.sin(2 * math.pi * f * self.t + p) for f, p in zip(self.freqs, self.phases[:2]))
        kappa = curvature_at(self.track, s_now + 0.3 * m.vx)
        beta = (self.wheelbase * kappa
                - 0.25 * m.e_y - 0.9 * (m.e_theta + math.atan2(m.vy, m.vx))
                - self.yaw_damping * (m.yaw_rate - m.vx * kappa)
                + 0.5 * self.steer_amplitude * wave)
        tau = 0.3 * math.sin(2 * math.pi * 0.17 * self.t + self.phases[0])
        self.t += self.period
        return np.array([gamma, float(np.clip(beta, -0.6, 0.6)), tau])


class DitheredDriver:
    """Wraps a driver and adds band-limited random offsets to its commands,
    so recorded inputs are not a function of the state alone."""

    def __init__(self, inner, sigma=(0.3, 0.03, 0.15), corr=0.8, seed=0):
        self.inner = inner
        self.sigma = np.asarray(sigma, dtype=float)
        self.corr = float(corr)
        self.seed = seed
        self.name = f"{getattr(inner, 'name', 'driver')}+dither"
        self.reset()

    @property
    def state(self):
        return getattr(self.inner, "state", None)

    def reset(self):
        if hasattr(self.inner, "reset"):
            self.inner.reset()
        self._rng = np.random.default_rng([int(self.seed), 2])
        self._d = np.zeros(3)

    def step(self, measured, s_now):
        cmd = np.asarray(self.inner.step(measured, s_now), dtype=float)
        a = self.corr
        self._d = a * self._d + math.sqrt(1.0 - a * a) * self.sigma * self._rng.standard_normal(3)
        return cmd + self._d


def make_driver(kind, track, plant_params=PlantParams(), seed=0, ocp_config=OcpConfig()):
    if kind in ("nominal", "nominal-controller"):
        return sqp.nominal_controller(track, plant_params, ocp_config)
    if kind in ("excitation", "scripted-excitation"):
        return ExcitationDriver(track, plant_params, seed)
    raise InvalidArgument(f"unknown driver {kind!r}")


def record_run(driver, plant_params, track, laps=10, duration=None, noise=0.0, seed=0,
               ocp_config=OcpConfig(), dither=None):
    """Drive the plant and log it.

    ``noise`` is the standard deviation of white noise added to the logged
    velocity channels (vx, vy, yaw_rate); the plant itself is noise-free.
    ``dither`` (per-channel standard deviations) wraps the driver in a
    :class:`DitheredDriver`. A simulation failure ends the run and is
    reported in the metadata.
    """
    if isinstance(driver, str):
        driver = make_driver(driver, track, plant_params, seed, ocp_config)
    if dither is not None and np.any(np.asarray(dither) > 0):
        driver = DitheredDriver(driver, dither, seed=seed)
    kind = getattr(driver, "name", type(driver).__name__)
    meta = {"driver": kind, "noise": float(noise), "seed": int(seed), "track_length": track.length,
            "dither": None if dither is None else [float(v) for v in dither]}
    if duration is not None and duration <= 0:
        log = RunLog.empty(meta)
        log.meta.update(termination="zero-duration", lap_times=[], lap_crossings=[])
        return log
    cfg = SimConfig(laps=0 if duration is not None else int(laps),
                    max_time=float(duration) if duration is not None else 0.0, seed=seed)
    log = closed_loop_simulate(driver, plant_params, track, cfg, meta)
    if noise > 0 and len(log):
        rng = np.random.default_rng([int(seed), 1])
        for c in ("vx", "vy", "yaw_rate"):
            log.samples[c] = log.samples[c] + noise * rng.standard_normal(len(log))
    return log


# --- smoothing --------------------------------------------------------------------

def _transition(dt, q):
    F = np.array([[1.0, dt], [0.0, 1.0]])
    Q = q * np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
    return F, Q


def _check_uniform(t):
    t = np.asarray(t, dtype=float)
    if t.size > 1:
        d = np.diff(t)
        if np.any(np.abs(d - d[0]) > 1e-9 * max(1.0, abs(d[0]))) or d[0] <= 0:
            raise InvalidArgument("timestamps must be uniform and increasing")


def _step(dt, n):
    if np.ndim(dt):
        t = np.asarray(dt, dtype=float)
        if t.size != n:
            raise InvalidArgument("timestamps and series differ in length")
        _check_uniform(t)
        dt = float(t[1] - t[0]) if n > 1 else 1.0
    if not dt > 0:
        raise InvalidArgument("dt must be positive")
    return float(dt)


def _info_passes(z, dt, q, r):
    """Forward filtered and backward predicted information pairs per sample,
    both started from zero information (diffuse)."""
    F, Q = _transition(dt, q)
    Fi = np.linalg.inv(F)
    Qi = np.linalg.inv(Q)
    Hr = np.array([1.0, 0.0]) / r
    n = z.size
    Yf = np.zeros((n, 2, 2))
    yf = np.zeros((n, 2))
    Y = np.zeros((2, 2))
    y = np.zeros(2)
    for k in range(n):
        if k:
            M = Fi.T @ Y @ Fi
            J = M @ np.linalg.inv(M + Qi)
            Y = (np.eye(2) - J) @ M
            y = (np.eye(2) - J) @ (Fi.T @ y)
        Y = Y + np.outer(Hr, Hr) * r
        y = y + Hr * z[k]
        Yf[k], yf[k] = Y, y
    Yb = np.zeros((n, 2, 2))
    yb = np.zeros((n, 2))
    Y = np.zeros((2, 2))
    y = np.zeros(2)
    for k in range(n - 2, -1, -1):
        # add z_{k+1}, then carry the information back through the model
        Y = Y + np.outer(Hr, Hr) * r
        y = y + Hr * z[k + 1]
        J = Y @ np.linalg.inv(Y + Qi)
        Y = F.T @ (Y - J @ Y) @ F
        y = F.T @ (y - J @ y)
        Yb[k], yb[k] = Y, y
    return Yf, yf, Yb, yb


def kalman_smooth(series, dt, process_noise=50.0, meas_noise=0.05):
    """Smoothed values and rates under a constant-acceleration model.

    Forward information filter plus a backward filter, combined per sample
    (the two-filter form of the RTS smoother). Both passes start diffuse, so
    a noiseless ramp is reproduced exactly and a time-reversed input gives
    the time-reversed output. ``process_noise`` is the white acceleration
    intensity, ``meas_noise`` the measurement standard deviation. ``dt`` may
    also be the array of timestamps, which must then be uniform.
    """
    z = np.asarray(series, dtype=float).ravel()
    dt = _step(dt, z.size)
    if z.size == 0:
        return np.zeros(0), np.zeros(0)
    if z.size == 1:
        return z.copy(), np.zeros(1)
    Yf, yf, Yb, yb = _info_passes(z, dt, process_noise, meas_noise)
    x = np.linalg.solve(Yf + Yb, (yf + yb)[..., None])[..., 0]
    return x[:, 0], x[:, 1]


def kalman_filter(series, dt, process_noise=50.0, meas_noise=0.05):
    """Causal (forward-only) estimates; the first sample has rate 0."""
    z = np.asarray(series, dtype=float).ravel()
    dt = _step(dt, z.size)
    if z.size < 2:
        return z.copy(), np.zeros(z.size)
    Yf, yf, _, _ = _info_passes(z, dt, process_noise, meas_noise)
    x = np.zeros((z.size, 2))
    x[0, 0] = z[0]
    x[1:] = np.linalg.solve(Yf[1:], yf[1:, :, None])[..., 0]
    return x[:, 0], x[:, 1]


def smooth_log(log, process_noise=50.0, meas_noise=0.05):
    """Copy of ``log`` with smoothed vx, vy, yaw_rate and the smoothed rates
    of vy and yaw_rate in place of the acceleration columns."""
    t = log.samples["t"]
    _check_uniform(t)
    out = {k: v.copy() for k, v in log.samples.items()}
    if t.size < 2:
        return RunLog(out, log.steps, dict(log.meta, smoothed=True))
    dt = float(t[1] - t[0])
    out["vx"], _ = kalman_smooth(log.samples["vx"], dt, process_noise, meas_noise)
    out["vy"], out["vy_dot"] = kalman_smooth(log.samples["vy"], dt, process_noise, meas_noise)
    out["yaw_rate"], out["yaw_acc"] = kalman_smooth(log.samples["yaw_rate"], dt, process_noise, meas_noise)
    return RunLog(out, log.steps, dict(log.meta, smoothed=True))


# --- datasets -----------------------------------------------------------------------

def lap_ids(log):
    return np.unique(log.samples["lap"].astype(int))


def assemble_dataset(log, laps=None, max_points=MAX_POINTS, stride=None, standardize=True):
    """(lateral, yaw) datasets from the sample table.

    Rows are GP inputs in slot order, targets the acceleration columns. Rows
    are restricted to whole ``laps`` when given and decimated by ``stride``
    (default: the smallest stride leaving at most ``max_points`` rows).
    """
    samples = log.samples if laps is None else log.laps_slice(laps)
    n = samples["t"].size
    if n == 0:
        raise InvalidArgument("empty log")
    if stride is None:
        stride = max(1, int(math.ceil(n / max_points)))
    idx = np.arange(0, n, int(stride))
    X = np.column_stack([samples[c][idx] for c in INPUT_COLUMNS])
    ds = [gp.GpDataset.from_arrays(X, samples[c][idx], standardize=standardize) for c in TARGET_COLUMNS]
    return ds[0], ds[1]


def split_laps(log, held_out=1):
    """Whole-lap split: (training laps, held-out laps). The partial lap after
    the last crossing is dropped; the last ``held_out`` complete laps are
    held out."""
    complete = len(log.lap_times)
    ids = list(range(complete))
    if held_out >= complete:
        raise InvalidArgument("not enough complete laps for the split")
    return ids[: complete - held_out], ids[complete - held_out:]


@dataclass
class TrainedModels:
    lateral: gp.GpModel
    yaw: gp.GpModel

    def save(self, prefix):
        self.lateral.save(f"{prefix}.lateral.json")
        self.yaw.save(f"{prefix}.yaw.json")

    @classmethod
    def load(cls, prefix):
        return cls(gp.GpModel.load(f"{prefix}.lateral.json"), gp.GpModel.load(f"{prefix}.yaw.json"))


def train_models(ds_lateral, ds_yaw, config=gp.TrainConfig()):
    """Fit hyperparameters per channel and return the full GP models."""
    out = []
    for k, ds in enumerate((ds_lateral, ds_yaw)):
        params = gp.train_hyperparams(ds, replace(config, seed=config.seed + k))
        out.append(gp.fit(params, ds))
    return TrainedModels(*out)


@dataclass
class ReducedModels:
    lateral: reduce.SodSet
    yaw: reduce.SodSet

    def sizes(self):
        return len(self.lateral), len(self.yaw)

    def save(self, prefix):
        self.lateral.save(f"{prefix}.lateral.json")
        self.yaw.save(f"{prefix}.yaw.json")

    @classmethod
    def load(cls, prefix, models):
        """Index files only; kernel parameters and data come from ``models``."""
        return cls(
            reduce.SodSet.load(f"{prefix}.lateral.json", models.lateral.params, models.lateral.dataset),
            reduce.SodSet.load(f"{prefix}.yaw.json", models.yaw.params, models.yaw.dataset),
        )


def reduce_models(models, threshold_factor=1.0):
    return ReducedModels(
        reduce.sod_reduce(models.lateral.params, models.lateral.dataset, threshold_factor),
        reduce.sod_reduce(models.yaw.params, models.yaw.dataset, threshold_factor),
    )


# --- evaluation ------------------------------------------------------------------------

def _rmse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    return float(math.sqrt(np.mean((a[ok] - b[ok]) ** 2))) if ok.any() else math.nan


def rmse_report(ds_lateral, ds_yaw, models=None, reduced=None, plant_params=None, t_nn=(30, 50)):
    """Acceleration RMSE per model variant and channel.

    Variants: ``nominal`` (the lag-free plant model), ``full`` (GPs on the
    full training set), ``sod`` (GPs on the subset) and ``nn`` (a local GP
    fitted per sample on its nearest SoD neighbours).
    """
    X = ds_lateral.inputs
    truth = (ds_lateral.targets, ds_yaw.targets)
    rows = {}
    if plant_params is not None:
        nom = NominalModel(plant_params.without_lag())
        pred = np.array([nom.predict(x) for x in X])
        rows["nominal"] = (_rmse(pred[:, 0], truth[0]), _rmse(pred[:, 1], truth[1]))
    if models is not None:
        rows["full"] = tuple(_rmse([gp.posterior_mean(m, x) for x in X], y)
                             for m, y in zip((models.lateral, models.yaw), truth))
    if reduced is not None:
        sets = (reduced.lateral, reduced.yaw)
        rows["sod"] = tuple(_rmse([gp.posterior_mean(m, x) for x in X], y)
                            for m, y in zip((s.model() for s in sets), truth))
        nn = []
        for sset, y, tn in zip(sets, truth, t_nn):
            pred = []
            for x in X:
                idx = np.sort(reduce.nn_select(sset, x, tn))
                pred.append(reduce.build_local_model(sset.dataset, sset.params, idx).mean(x))
            nn.append(_rmse(pred, y))
        rows["nn"] = tuple(nn)
    return {k: {"vy_dot": v[0], "yaw_acc": v[1]} for k, v in rows.items()}


def one_step_prediction_report(log):
    """RMSE of the controller's one-period-ahead velocity predictions against
    the velocities measured at the next control step."""
    st = log.steps
    if st["t"].size < 2:
        return {"vy": math.nan, "yaw_rate": math.nan, "n": 0}
    pv, pr = st["pred_vy"][:-1], st["pred_yaw_rate"][:-1]
    ok = np.isfinite(pv) & np.isfinite(pr)
    return {
        "vy": _rmse(pv[ok], st["vy"][1:][ok]),
        "yaw_rate": _rmse(pr[ok], st["yaw_rate"][1:][ok]),
        "n": int(ok.sum()),
    }


def bound_statistics(log, track):
    """Per-lap max excess over the raw and reduced bounds and the share of
    samples beyond the reduced bound."""
    if not len(log):
        return []
    raw, red = track_violations(log, track)
    laps = log.samples["lap"].astype(int)
    out = []
    for k in np.unique(laps):
        m = laps == k
        out.append({"lap": int(k), "max_raw_excess": float(raw[m].max()),
                    "max_reduced_excess": float(red[m].max()),
                    "reduced_share": float((red[m] > 0).mean())})
    return out


def eta_check(log, track, bound_reduction=0.5, tol=1e-9):
    """Controller steps whose measured e_y lies beyond the reduced bound must
    carry a slack of restoring sign. Returns (n_beyond, n_bad, max |eta|)."""
    st = log.steps
    n_beyond = n_bad = 0
    for s, ey, eta in zip(st["s"], st["e_y"], st["eta"]):
        lb, ub = bounds_at(track, s)
        lo, hi = lb + bound_reduction, ub - bound_reduction
        if ey > hi:
            n_beyond += 1
            n_bad += not eta < -tol
        elif ey < lo:
            n_beyond += 1
            n_bad += not eta > tol
    max_eta = float(np.abs(st["eta"]).max()) if st["eta"].size else 0.0
    return n_beyond, n_bad, max_eta


@dataclass
class EvalReport:
    rmse: dict = field(default_factory=dict)  # variant -> {vy_dot, yaw_acc}
    one_step: dict = field(default_factory=dict)  # run -> {vy, yaw_rate, n}
    lap_times: dict = field(default_factory=dict)  # run -> [s]
    bounds: dict = field(default_factory=dict)  # run -> per-lap stats
    meta: dict = field(default_factory=dict)

    def check(self):
        vals = [v for d in self.rmse.values() for v in d.values()]
        vals += [d[k] for d in self.one_step.values() for k in ("vy", "yaw_rate")]
        vals += [t for lt in self.lap_times.values() for t in lt]
        if any(v < 0 for v in vals if not math.isnan(v)):
            raise InvalidArgument("report values must be non-negative")
        return self

    def one_step_ratio(self, a="blackbox", b="nominal"):
        """Ratio of summed one-step velocity RMSEs (vy + yaw_rate)."""
        x, y = self.one_step.get(a), self.one_step.get(b)
        if not x or not y:
            return math.nan
        return (x["vy"] + x["yaw_rate"]) / (y["vy"] + y["yaw_rate"])

    def to_dict(self):
        return asdict(self)

    def save(self, prefix):
        """``prefix.json`` summary, ``prefix.csv`` metric table and
        ``prefix.long.csv`` (variable, index, value, run)."""
        self.check()
        with open(f"{prefix}.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        with open(f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "variant", "channel", "value"])
            for var, d in self.rmse.items():
                for ch, v in d.items():
                    w.writerow(["accel_rmse", var, ch, repr(v)])
            for run, d in self.one_step.items():
                for ch in ("vy", "yaw_rate"):
                    w.writerow(["one_step_rmse", run, ch, repr(d[ch])])
            for run, lt in self.lap_times.items():
                for k, v in enumerate(lt):
                    w.writerow(["lap_time", run, f"lap{k}", repr(v)])
        with open(f"{prefix}.long.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "index", "value", "run"])
            for run, lt in self.lap_times.items():
                for k, v in enumerate(lt):
                    w.writerow(["lap_time", k, repr(v), run])
            for run, stats in self.bounds.items():
                for row in stats:
                    for key in ("max_raw_excess", "max_reduced_excess", "reduced_share"):
                        w.writerow([key, row["lap"], repr(row[key]), run])


def evaluate_runs(logs, track, models=None, reduced=None, held_out=None, plant_params=None):
    """Build an :class:`EvalReport` from named closed-loop logs and, when
    given, models plus a held-out (lateral, yaw) dataset pair."""
    rep = EvalReport()
    for name, log in logs.items():
        rep.one_step[name] = one_step_prediction_report(log)
        rep.lap_times[name] = log.lap_times
        rep.bounds[name] = bound_statistics(log, track)
    if held_out is not None:
        rep.rmse = rmse_report(*held_out, models=models, reduced=reduced, plant_params=plant_params)
    rep.meta = {"runs": sorted(logs), "config": config_hash({k: v.meta for k, v in logs.items()})}
    return rep.check()


def models_for_controller(reduced):
    """Model provider for the black-box controller."""
    return sqp.NearestNeighbourModels(reduced.lateral, reduced.yaw)


def blackbox_config(dataset, config=OcpConfig(), quantile=0.99, margin=0.05):
    """Controller config whose steering bound stays inside the recorded range.

    Away from its data the GP reverts to its prior mean, which makes steering
    look free to the optimizer; bounding beta to the observed envelope keeps
    the plan where the model is informed.
    """
    beta = np.abs(np.asarray(dataset.inputs, dtype=float)[:, INPUT_COLUMNS.index("beta_act")])
    if beta.size == 0:
        raise InvalidArgument("empty dataset")
    limit = min(float(np.quantile(beta, quantile)) + margin, config.stage_ub[3])
    lb, ub = list(config.stage_lb), list(config.stage_ub)
    lb[3], ub[3] = -limit, limit
    return replace(config, stage_lb=tuple(lb), stage_ub=tuple(ub))


__all__ = [
    "DEFAULT_DITHER", "ExcitationDriver", "DitheredDriver", "make_driver", "record_run", "kalman_smooth", "kalman_filter", "smooth_log",
    "assemble_dataset", "split_laps", "TrainedModels", "train_models", "ReducedModels", "reduce_models",
    "rmse_report", "one_step_prediction_report", "bound_statistics", "eta_check", "EvalReport",
    "evaluate_runs", "models_for_controller", "blackbox_config",
]
