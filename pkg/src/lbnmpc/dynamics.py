"""Velocity-form vehicle model in the spatial (arc-length) domain.

State ``x = [vx, vy, yaw_rate, e_theta, e_y, gamma, beta, tau_v, t]`` and
input ``u = [gamma_rate, beta_rate, tau_v_rate, eta]``. Lateral and yaw
accelerations come from an acceleration model (GP pair or nominal plant);
everything else is kinematics.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from . import core
from .errors import InvalidArgument, SingularityError
from .track import curvature_at

NX = core.NX
NU = core.NU
IDX = {name: k for k, name in enumerate(
    ["vx", "vy", "yaw_rate", "e_theta", "e_y", "gamma", "beta", "tau_v", "t"])}
S_DOT_MIN = core.S_DOT_MIN
TS_DEFAULT = 0.3


@dataclass
class VehicleState:
    vx: float
    vy: float = 0.0
    yaw_rate: float = 0.0
    e_theta: float = 0.0
    e_y: float = 0.0
    gamma: float = 0.0
    beta: float = 0.0
    tau_v: float = 0.0
    t: float = 0.0

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass
class ControlInput:
    gamma_rate: float = 0.0
    beta_rate: float = 0.0
    tau_v_rate: float = 0.0
    eta: float = 0.0

    def as_array(self):
        return np.array(astuple(self), dtype=float)


class GpAccelerationModels:
    """Lateral (vy_dot) and yaw (yaw_acc) GP channels.

    Each channel is anything with a ``pack()`` returning ``(X, alpha, p)``:
    a fitted :class:`~lbnmpc.gp.GpModel` or a :class:`~lbnmpc.reduce.LocalModel`.
    """

    kind = core.KIND_GP

    def __init__(self, lateral, yaw):
        self.lateral = lateral
        self.yaw = yaw
        self._pack = (core.KIND_GP, *lateral.pack(), *yaw.pack(), np.zeros(17))

    def pack(self):
        return self._pack

    def predict(self, xgp):
        return core.accel(np.asarray(xgp, dtype=float), *self._pack)[0]

    def jacobian(self, xgp):
        return core.accel(np.asarray(xgp, dtype=float), *self._pack)[1]


def _as_vec(x, n):
    if isinstance(x, (VehicleState, ControlInput)):
        return x.as_array()
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise InvalidArgument(f"expected a {n}-vector")
    return x


def gp_input_from_state(x):
    x = _as_vec(x, NX)
    return x[list(core.GP_SLOTS)].copy()


def time_dynamics(x, u, models, zeta=0.0):
    """dx/dt. Only the e_theta slot depends on curvature (through s-dot)."""
    x = _as_vec(x, NX)
    u = _as_vec(u, NU)
    acc = models.predict(gp_input_from_state(x))
    s_dot, e_theta_dot, e_y_dot = frenet_rates(x, zeta)
    return np.array([x[5], acc[0], acc[1], e_theta_dot, e_y_dot, u[0], u[1], u[2], 1.0])


def frenet_rates(x, zeta):
    """(s_dot, e_theta_dot, e_y_dot) with body-frame velocities."""
    x = _as_vec(x, NX)
    vx, vy, r, eth, ey = x[:5]
    den = 1.0 - zeta * ey
    if abs(den) < 1e-6:
        raise SingularityError("1 - zeta*e_y vanishes")
    s_dot = (vx * math.cos(eth) - vy * math.sin(eth)) / den
    return s_dot, r - zeta * s_dot, vx * math.sin(eth) + vy * math.cos(eth)


def spatial_dynamics(x, u, zeta, models, with_jacobian=False):
    """dx/ds = (dx/dt) / s_dot; optionally with (df/dx, df/du)."""
    x = _as_vec(x, NX)
    u = _as_vec(u, NU)
    acc, jac = core.accel(gp_input_from_state(x), *models.pack())
    f, fx, fu = core.spatial_rhs(x, u, zeta, acc, jac, with_jacobian)
    return (f, fx, fu) if with_jacobian else f


def rk4_step(f, x, u, h):
    """One classical RK4 step of ``dx/ds = f(x, u)`` with u held."""
    if not h > 0:
        raise InvalidArgument("step must be positive")
    x = np.asarray(x, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substep_grid(s_from, s_to, track, substeps=None, ts=TS_DEFAULT):
    """Substep count, length and curvature samples for one interval."""
    span = s_to - s_from
    if not span > 0:
        raise InvalidArgument("interval must have positive length")
    if substeps is None:
        substeps = max(1, int(round(span / ts)))
    h = span / substeps
    zetas = np.array([curvature_at(track, s_from + k * h) for k in range(substeps)])
    return substeps, h, zetas


def integrate_interval(x, u, s_from, s_to, models, track, substeps=None, ts=TS_DEFAULT):
    _, h, zetas = substep_grid(s_from, s_to, track, substeps, ts)
    xn, _, _ = core.interval(_as_vec(x, NX), _as_vec(u, NU), zetas, h, False, *models.pack())
    return xn


def sensitivities(x, u, s_from, s_to, models, track, substeps=None, ts=TS_DEFAULT):
    """(x_next, A, B) by forward sensitivity propagation through every RK4 stage."""
    _, h, zetas = substep_grid(s_from, s_to, track, substeps, ts)
    return core.interval(_as_vec(x, NX), _as_vec(u, NU), zetas, h, True, *models.pack())
