"""Real-time iteration controller and an offline converged SQP.

One control step shifts the previous iterate onto the new grid, picks the
acceleration models along it, linearizes, solves one QP and takes the full
step. Commands are the command states of the updated prediction one control
period ahead, plus a per-channel lead that offsets actuator lag.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import core, dynamics, ocp, qp as qpsolver, reduce
from .errors import InvalidArgument, NumericalFailure, SingularityError
from .track import curvature_at

CMD_SLOTS = (5, 6, 7)
MAX_FAILURES = 5
PREDICT_STEP = 0.0375  # m, rollout substep for the one-period-ahead prediction


@dataclass(frozen=True)
class SqpSettings:
    mode: str = "rti"
    max_iter: int = 1
    tol: float = 1e-6
    armijo_c: float = 1e-4
    min_step: float = 1.0 / 1024
    merit_margin: float = 1.1
    qp_tol: float = 1e-6
    # per-channel lead (s) on top of one control period when reading the
    # commands off the plan; offsets first-order actuator lag
    command_lead: tuple = (0.08, 0.12, 0.08)

    def __post_init__(self):
        if self.mode not in ("rti", "converged"):
            raise InvalidArgument("mode must be 'rti' or 'converged'")
        if self.max_iter < 1:
            raise InvalidArgument("max_iter must be >= 1")


@dataclass
class StepDiagnostics:
    solve_time_ms: float = 0.0
    kkt_stationarity: float = math.nan
    kkt_max: float = math.nan
    qp_iters: int = 0
    qp_status: str = ""
    degraded: bool = False
    failed: bool = False
    cold_start: bool = False
    eta: float = 0.0
    pred_vy: float = math.nan
    pred_yaw_rate: float = math.nan
    pred_vx: float = math.nan


@dataclass
class ControllerState:
    iterate: ocp.NlpIterate | None = None
    s_prev: float = math.nan
    commands: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchors: np.ndarray | None = None
    failures: int = 0
    needs_cold_start: bool = True
    diagnostics: StepDiagnostics = field(default_factory=StepDiagnostics)


# --- model providers -------------------------------------------------------

class FixedModels:
    """Same acceleration model on every interval (nominal controller)."""

    def __init__(self, model):
        self.model = model

    def along(self, anchors):
        return [self.model] * len(anchors)


class NearestNeighbourModels:
    """Local GP pair per interval from the SoD sets (black-box controller)."""

    def __init__(self, sod_lateral, sod_yaw, t_nn=(reduce.T_NN_LATERAL, reduce.T_NN_YAW)):
        self.sod_lateral = sod_lateral
        self.sod_yaw = sod_yaw
        self.t_nn = tuple(t_nn)

    def along(self, anchors):
        lat = reduce.select_along_horizon(self.sod_lateral, anchors, self.t_nn[0])
        yaw = reduce.select_along_horizon(self.sod_yaw, anchors, self.t_nn[1])
        return [dynamics.GpAccelerationModels(a, b) for a, b in zip(lat, yaw)]


# --- iterate construction ----------------------------------------------------

def cold_start(measured, s_now, track, config=ocp.OcpConfig()):
    """Constant-speed centerline rollout with zero controls.

    Command states are held at their measured values.
    """
    x = dynamics._as_vec(measured, dynamics.NX)
    s = s_now + config.offsets
    vx = float(np.clip(x[0], config.stage_lb[0], config.stage_ub[0]))
    X = np.zeros((config.n_nodes, dynamics.NX))
    X[:, 0] = vx
    X[:, 2] = [curvature_at(track, sj) * vx for sj in s]
    X[:, 5:8] = x[5:8]
    X[:, 8] = config.offsets / vx
    x0 = x.copy()
    x0[8] = 0.0
    return ocp.NlpIterate(X, np.zeros((config.n_nodes - 1, dynamics.NU)), s, x0)


def _interp_rows(s_old, V, s_new):
    out = np.empty((s_new.size, V.shape[1]))
    for k in range(V.shape[1]):
        out[:, k] = np.interp(s_new, s_old, V[:, k])
    return out


def warm_start_shift(iterate, s_now, config=ocp.OcpConfig()):
    """Re-interpolate the iterate onto ``s_now + offsets`` (linear in s).

    Nodes beyond the old horizon hold the last values; controls are treated
    as attached to their interval start. ``t`` is re-zeroed at the new first
    node.
    """
    s_new = s_now + config.offsets
    X = _interp_rows(iterate.s, iterate.X, s_new)
    U = _interp_rows(iterate.s[:-1], iterate.U, s_new[:-1])
    X[:, 8] -= X[0, 8]
    x0 = iterate.x0_bar.copy()
    return ocp.NlpIterate(X, U, s_new, x0)


# --- prediction ---------------------------------------------------------------

def rollout_until(x0, U, s_nodes, models, track, t_target, step=PREDICT_STEP):
    """Integrate the model from ``x0`` with the piecewise-constant controls
    until the time state reaches ``t_target``; linear within the last substep."""
    return rollout_times(x0, U, s_nodes, models, track, [t_target], step)[0]


def rollout_times(x0, U, s_nodes, models, track, times, step=PREDICT_STEP):
    """States at each of the increasing ``times`` (relative to ``x0``); times
    beyond the horizon get the terminal state."""
    x = np.array(x0, dtype=float)
    t0 = x[8]
    times = list(times)
    out = []
    for j in range(U.shape[0]):
        span = s_nodes[j + 1] - s_nodes[j]
        n = max(1, int(math.ceil(span / step - 1e-9)))
        h = span / n
        pack = models[j].pack()
        u = np.ascontiguousarray(U[j])
        for k in range(n):
            zeta = np.array([curvature_at(track, s_nodes[j] + k * h)])
            xn, _, _ = core.interval(x, u, zeta, h, False, *pack)
            while len(out) < len(times) and xn[8] - t0 >= times[len(out)]:
                w = (times[len(out)] - (x[8] - t0)) / (xn[8] - x[8])
                out.append((1.0 - w) * x + w * xn)
            if len(out) == len(times):
                return out
            x = xn
    return out + [x] * (len(times) - len(out))


# --- controller ---------------------------------------------------------------

class Controller:
    """RTI controller driving ``commands = step(measured, s_now)``."""

    def __init__(self, track, models, config=ocp.OcpConfig(), settings=SqpSettings(), name="controller"):
        self.track = track
        self.models = models
        self.config = config
        self.settings = settings
        self.name = name
        self.state = ControllerState()

    @property
    def period(self):
        return 1.0 / self.config.control_rate

    def reset(self, commands=(0.0, 0.0, 0.0)):
        self.state = ControllerState(commands=np.array(commands, dtype=float))

    def measured_vector(self, measured):
        """Controller-side x_bar_0: measured motion, own previous commands, t = 0."""
        x = dynamics._as_vec(measured, dynamics.NX).copy()
        x[5:8] = self.state.commands
        x[8] = 0.0
        return x

    def step(self, measured, s_now):
        commands, self.state = rti_step(self, self.state, measured, s_now)
        return commands


def _safe_stop(config):
    return np.array([config.stage_lb[2], 0.0, 0.0])


def _clip_commands(cmd, config):
    lo = np.array(config.stage_lb[2:5])
    hi = np.array(config.stage_ub[2:5])
    return np.clip(cmd, lo, hi)


def rti_step(ctrl, cstate, measured, s_now):
    """One real-time iteration. Returns (commands, new ControllerState).

    ``s_now`` is the unwrapped arc length of the vehicle; the input state
    is left untouched.
    """
    cfg = ctrl.config
    t_start = time.perf_counter()
    x0_bar = ctrl.measured_vector(measured) if isinstance(ctrl, Controller) else measured
    if not np.all(np.isfinite(x0_bar)):
        raise InvalidArgument("measured state not finite")
    new = replace(cstate, diagnostics=StepDiagnostics())
    diag = new.diagnostics
    regress = not math.isnan(cstate.s_prev) and s_now < cstate.s_prev - 0.5 * ctrl.track.length
    if cstate.iterate is None or cstate.needs_cold_start or regress:
        it = cold_start(x0_bar, s_now, ctrl.track, cfg)
        diag.cold_start = True
    else:
        it = warm_start_shift(cstate.iterate, s_now, cfg)
    it.x0_bar = x0_bar.copy()
    try:
        anchors = np.array([dynamics.gp_input_from_state(x) for x in it.X[:-1]])
        models = ctrl.models.along(anchors)
        qp = ocp.linearize(cfg, ctrl.track, models, it)
        sol = qpsolver.solve(qp, tol=ctrl.settings.qp_tol)
    except (SingularityError, NumericalFailure):
        diag.failed = True
        new.failures = MAX_FAILURES
        new.needs_cold_start = True
        new.commands = _safe_stop(cfg)
        new.iterate = it
        new.s_prev = s_now
        diag.solve_time_ms = 1e3 * (time.perf_counter() - t_start)
        return new.commands.copy(), new
    diag.qp_iters = sol.iterations
    diag.qp_status = sol.status
    if sol.status != qpsolver.OPTIMAL:
        diag.degraded = True
        new.failures = cstate.failures + 1
        new.iterate = it
        new.s_prev = s_now
        if new.failures >= MAX_FAILURES:
            diag.failed = True
            new.needs_cold_start = True
            new.commands = _safe_stop(cfg)
        diag.solve_time_ms = 1e3 * (time.perf_counter() - t_start)
        return new.commands.copy(), new
    kkt = qpsolver.kkt_residuals(qp, sol)
    diag.kkt_stationarity = kkt.stationarity
    diag.kkt_max = kkt.max()
    it.X = it.X + sol.dx
    it.U = it.U + sol.du
    diag.eta = float(it.U[0, 3])
    lead = np.asarray(ctrl.settings.command_lead, dtype=float)
    times = np.concatenate([[ctrl.period], ctrl.period + lead])
    order = np.argsort(times, kind="stable")
    try:
        states = rollout_times(it.X[0], it.U, it.s, models, ctrl.track, times[order])
        at = [None] * times.size
        for k, o in enumerate(order):
            at[o] = states[k]
    except SingularityError:
        at = [it.X[min(1, it.X.shape[0] - 1)]] * times.size
    pred = at[0]
    diag.pred_vx, diag.pred_vy, diag.pred_yaw_rate = float(pred[0]), float(pred[1]), float(pred[2])
    cmd = np.array([at[1 + c][slot] for c, slot in enumerate(CMD_SLOTS)])
    new.commands = _clip_commands(cmd, cfg)
    new.iterate = it
    new.anchors = anchors
    new.failures = 0
    new.needs_cold_start = False
    new.s_prev = s_now
    diag.solve_time_ms = 1e3 * (time.perf_counter() - t_start)
    return new.commands.copy(), new


def nominal_controller(track, plant_params, config=ocp.OcpConfig(), settings=SqpSettings()):
    from .plant import NominalModel

    return Controller(track, FixedModels(NominalModel(plant_params.without_lag())), config, settings, "nominal")


def blackbox_controller(track, sod_lateral, sod_yaw, config=ocp.OcpConfig(), settings=SqpSettings()):
    models = NearestNeighbourModels(sod_lateral, sod_yaw, config.t_nn)
    return Controller(track, models, config, settings, "blackbox")


# --- converged SQP -------------------------------------------------------------

@dataclass
class SqpResult:
    iterate: ocp.NlpIterate
    converged: bool
    iterations: int
    step_norms: list
    kkt: list
    alphas: list = field(default_factory=list)


def _merit(config, track, models, it, nu):
    a = ocp.transcribe(config, track, models, it)
    infeas = float(np.abs(a).sum()) + float(np.abs(it.x0_bar - it.X[0]).sum())
    infeas += ocp.constraint_violation(config, track, it)
    return ocp.nlp_cost(config, it) + nu * infeas, infeas


def sqp_solve(config, track, models, iterate, settings=SqpSettings(mode="converged", max_iter=50)):
    """Fully converged SQP with Armijo backtracking on the l1 merit function.

    Stops when the QP step is below ``settings.tol`` in max-norm; returns the
    best iterate with ``converged=False`` otherwise.
    """
    models = ocp._per_interval(models, config.n_nodes - 1)
    it = iterate.copy()
    nu = 1.0
    norms, kkts, alphas = [], [], []
    for k in range(settings.max_iter):
        qp = ocp.linearize(config, track, models, it)
        sol = qpsolver.solve(qp, tol=settings.qp_tol)
        if sol.status != qpsolver.OPTIMAL:
            return SqpResult(it, False, k + 1, norms, kkts, alphas)
        kkts.append(qpsolver.kkt_residuals(qp, sol).max())
        step = max(float(np.abs(sol.dx).max()), float(np.abs(sol.du).max()))
        norms.append(step)
        if step <= settings.tol:
            return SqpResult(it, True, k + 1, norms, kkts, alphas)
        lam_max = max(
            float(np.abs(sol.pi).max()),
            float(np.abs(sol.pi_init).max()),
            max(float(np.abs(m).max()) for m in sol.mu),
            float(np.abs(sol.mu_N).max()),
        )
        nu = max(nu, settings.merit_margin * lam_max)
        phi0, infeas = _merit(config, track, models, it, nu)
        grad_dot = sum(float(qp.g[j] @ np.concatenate([sol.dx[j], sol.du[j]])) for j in range(qp.N))
        grad_dot += float(qp.g_N @ sol.dx[-1])
        slope = grad_dot - nu * infeas
        alpha = 1.0
        while True:
            trial = it.copy()
            trial.X = it.X + alpha * sol.dx
            trial.U = it.U + alpha * sol.du
            try:
                phi, _ = _merit(config, track, models, trial, nu)
            except SingularityError:
                phi = math.inf
            if phi <= phi0 + settings.armijo_c * alpha * slope or alpha <= settings.min_step:
                break
            alpha *= 0.5
        alphas.append(alpha)
        it = trial
    return SqpResult(it, False, settings.max_iter, norms, kkts, alphas)
