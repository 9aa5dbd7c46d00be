"""Ground-truth plant: dynamic bicycle with Pacejka lateral tires.

The same tire equations, without actuator lag, form the nominal controller
model (:class:`NominalModel`). Longitudinal acceleration is commanded
directly (``gamma``): the motor loop realises the requested body-frame
acceleration up to a first-order lag, so ``vx_dot = gamma_act``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import core
from .errors import InvalidArgument, PlantStall

G = 9.81
VX_STALL = 0.1


@dataclass(frozen=True)
class PlantParams:
    mass: float = 190.0
    yaw_inertia: float = 18.0
    lf: float = 0.55
    lr: float = 0.65
    B_front: float = 9.0
    C_front: float = 1.4
    B_rear: float = 10.0
    C_rear: float = 1.4
    friction: float = 0.8
    tv_gain: float = 150.0
    steer_limit: float = 0.5  # road-wheel angle limit (rad); 0 = linear steering
    cg_height: float = 0.3
    lag_gamma: float = 0.08
    lag_beta: float = 0.12
    lag_tau: float = 0.08
    combined_slip: bool = True
    load_transfer: bool = True
    tire_forces: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if f.name.startswith("lag_"):
                if v < 0:
                    raise InvalidArgument(f"{f.name} must be >= 0")
            elif f.name == "steer_limit":
                if v < 0:
                    raise InvalidArgument("steer_limit must be >= 0")
            elif not v > 0:
                raise InvalidArgument(f"{f.name} must be positive")

    @property
    def wheelbase(self):
        return self.lf + self.lr

    @property
    def D_front(self):
        return self.friction * self.mass * G * self.lr / self.wheelbase

    @property
    def D_rear(self):
        return self.friction * self.mass * G * self.lf / self.wheelbase

    @property
    def gamma_max(self):
        return self.friction * G

    def nominal_vector(self):
        return np.array(
            [
                self.mass,
                self.yaw_inertia,
                self.lf,
                self.lr,
                self.B_front,
                self.C_front,
                self.D_front if self.tire_forces else 0.0,
                self.B_rear,
                self.C_rear,
                self.D_rear if self.tire_forces else 0.0,
                self.tv_gain,
                self.cg_height,
                G,
                self.gamma_max,
                float(self.load_transfer),
                float(self.combined_slip),
                self.steer_limit,
            ]
        )

    def without_lag(self):
        return replace(self, lag_gamma=0.0, lag_beta=0.0, lag_tau=0.0)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass(frozen=True)
class PlantState:
    X: float
    Y: float
    psi: float
    vx: float
    vy: float
    yaw_rate: float
    gamma_act: float = 0.0
    beta_act: float = 0.0
    tau_act: float = 0.0

    def as_array(self):
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


class NominalModel:
    """Lag-free plant accelerations behind the acceleration-model interface."""

    kind = core.KIND_NOMINAL

    def __init__(self, params=PlantParams()):
        self.params = params
        self._nom = np.ascontiguousarray(params.nominal_vector())
        empty = np.zeros((0, core.NGP))
        self._pack = (core.KIND_NOMINAL, empty, np.zeros(0), np.zeros(20),
                      empty, np.zeros(0), np.zeros(20), self._nom)

    def pack(self):
        return self._pack

    def predict(self, xgp):
        return core.accel(np.asarray(xgp, dtype=float), *self._pack)[0]

    def jacobian(self, xgp):
        return core.accel(np.asarray(xgp, dtype=float), *self._pack)[1]


def _lag(cmd, act, tau):
    return 0.0 if tau == 0.0 else (cmd - act) / tau


def wheel_angle(beta, params):
    """Road-wheel angle for steering state ``beta``: linear for small angles,
    saturating smoothly at ``steer_limit``."""
    L = params.steer_limit
    return L * math.tanh(beta / L) if L > 0 else beta


def tire_forces(vx, vy, r, gamma, beta, params):
    """Front and rear lateral forces (N) from the magic formula."""
    if not params.tire_forces:
        return 0.0, 0.0
    alpha_f = wheel_angle(beta, params) - math.atan2(vy + params.lf * r, vx)
    alpha_r = -math.atan2(vy - params.lr * r, vx)
    Df, Dr = params.D_front, params.D_rear
    if params.load_transfer:
        dfz = params.mass * params.cg_height * gamma / params.wheelbase
        Df *= 1.0 - dfz / (params.mass * G * params.lr / params.wheelbase)
        Dr *= 1.0 + dfz / (params.mass * G * params.lf / params.wheelbase)
    if params.combined_slip:
        # friction ellipse on the driven rear axle
        ratio2 = (gamma / params.gamma_max) ** 2
        Dr *= math.sqrt(1.0 - ratio2) if ratio2 < 0.9 else math.sqrt(0.1)
    fyf = Df * math.sin(params.C_front * math.atan(params.B_front * alpha_f))
    fyr = Dr * math.sin(params.C_rear * math.atan(params.B_rear * alpha_r))
    return fyf, fyr


def _derivative(s, cmd, params):
    X, Y, psi, vx, vy, r, g_act, b_act, t_act = s
    if vx <= VX_STALL:
        raise PlantStall(f"vx={vx:.3f} m/s")
    fyf, fyr = tire_forces(vx, vy, r, g_act, b_act, params)
    cb = math.cos(wheel_angle(b_act, params))
    cps, sps = math.cos(psi), math.sin(psi)
    m = params.mass
    d = np.empty(9)
    d[0] = vx * cps - vy * sps
    d[1] = vx * sps + vy * cps
    d[2] = r
    d[3] = g_act
    d[4] = (fyf * cb + fyr) / m - vx * r
    d[5] = (params.lf * fyf * cb - params.lr * fyr + params.tv_gain * t_act) / params.yaw_inertia
    d[6] = _lag(cmd[0], g_act, params.lag_gamma)
    d[7] = _lag(cmd[1], b_act, params.lag_beta)
    d[8] = _lag(cmd[2], t_act, params.lag_tau)
    return d


def _apply_direct(s, cmd, params):
    # zero lag: actuators follow commands instantly
    if params.lag_gamma == 0.0:
        s[6] = cmd[0]
    if params.lag_beta == 0.0:
        s[7] = cmd[1]
    if params.lag_tau == 0.0:
        s[8] = cmd[2]
    return s


def plant_step(state, commands, params, dt):
    """Advance the plant by ``dt`` seconds with RK4, commands held."""
    if not 0.0 < dt <= 0.02:
        raise InvalidArgument("dt must lie in (0, 0.02] s")
    cmd = np.asarray(commands, dtype=float)
    s = _apply_direct(state.as_array(), cmd, params)
    k1 = _derivative(s, cmd, params)
    k2 = _derivative(s + 0.5 * dt * k1, cmd, params)
    k3 = _derivative(s + 0.5 * dt * k2, cmd, params)
    k4 = _derivative(s + dt * k3, cmd, params)
    s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return PlantState.from_array(s)


def plant_accelerations(state, params):
    """(vy_dot, yaw_acc) of the plant at ``state`` (ground-truth targets)."""
    d = _derivative(state.as_array(), np.zeros(3), params)
    return float(d[4]), float(d[5])
