"""Multiple-shooting transcription on the non-uniform spatial grid and
Gauss-Newton linearization into a structured QP."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics
from .errors import InvalidArgument
from .track import bounds_at, curvature_at

NX = dynamics.NX
NU = dynamics.NU

GRID = (1, 2, 3, 4, 5, 6, 8, 10, 12, 14, 16, 18, 20, 23, 26, 29, 32, 35, 38,
        41, 44, 47, 50, 53, 56, 59, 62, 65, 68, 71, 74, 77, 80)

# constraint rows: [vx, e_theta, gamma, beta, tau_v, gamma_rate, tau_v_rate, beta_rate, eta, e_y + eta]
# beta is held to the plant's steering range: beyond it the wheel angle
# saturates, steering loses authority and the linearized QP turns infeasible
STEER_BOUND = 0.5
STAGE_LB = (2.5, -math.pi / 2, -4.2, -STEER_BOUND, -1.7, -1e3, -1e2, -1e1, -5.0)
STAGE_UB = (15.0, math.pi / 2, 2.0, STEER_BOUND, 1.7, 1e3, 1e2, 1e1, 5.0)
N_STAGE_ROWS = 10
N_TERM_ROWS = 6


@dataclass(frozen=True)
class OcpConfig:
    N: int = 80
    Ts: float = 0.3
    grid: tuple = GRID
    # stage residual [gamma_rate, tau_v_rate, beta_rate, eta]
    W: tuple = (2e-3, 5e-2, 1e-2, 5e1)
    # terminal residual [t, e_theta - ref, e_y - ref]
    W_N: tuple = (1e-1, 1e3, 1e2)
    stage_lb: tuple = STAGE_LB
    stage_ub: tuple = STAGE_UB
    bound_reduction: float = 0.5
    terminal_ref: tuple = (0.0, 0.0)
    # proximal damping on every primal variable; keeps the single RTI step from
    # drifting along the weakly penalized steering directions
    regularization: float = 1e-2
    control_rate: float = 20.0
    t_nn: tuple = (30, 50)
    # RK4 substeps per Ts cell; lateral and yaw modes are stiff in s at low speed
    substeps_per_cell: int = 8
    # terminal heading term: "heading" (e_theta) or "course" (e_theta + atan(vy/vx))
    terminal_heading: str = "heading"
    # speed envelope from the curvature ahead of a node:
    # vx <= min_d sqrt(a_lat / |zeta(s + d)| + 2 a_brake d); a_lat = 0 disables.
    # Applied at the terminal node, or at every node with speed_envelope="all".
    envelope_lat_accel: float = 6.0
    envelope_brake: float = 3.0
    envelope_lookahead: float = 30.0
    speed_envelope: str = "all"

    def __post_init__(self):
        g = tuple(int(v) for v in self.grid)
        object.__setattr__(self, "grid", g)
        if g[0] != 1 or g[-1] != self.N or any(b <= a for a, b in zip(g, g[1:])):
            raise InvalidArgument("grid must increase strictly from 1 to N")
        if min(self.W) < 0 or min(self.W_N) < 0:
            raise InvalidArgument("weights must be non-negative")
        if len(self.stage_lb) != 9 or len(self.stage_ub) != 9:
            raise InvalidArgument("stage bounds need 9 fixed entries")
        if any(lo > hi for lo, hi in zip(self.stage_lb, self.stage_ub)):
            raise InvalidArgument("lower bound above upper bound")
        if self.speed_envelope not in ("terminal", "all"):
            raise InvalidArgument("speed_envelope must be 'terminal' or 'all'")
        if self.terminal_heading not in ("heading", "course"):
            raise InvalidArgument("terminal_heading must be 'heading' or 'course'")
        if self.substeps_per_cell < 1:
            raise InvalidArgument("substeps_per_cell must be >= 1")
        for name in ("W", "W_N", "stage_lb", "stage_ub", "terminal_ref", "t_nn"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def n_nodes(self):
        return len(self.grid)

    @property
    def offsets(self):
        """Node abscissae relative to the current position (m)."""
        return (np.array(self.grid, dtype=float) - self.grid[0]) * self.Ts

    def substeps(self, j):
        """RK4 substep count on interval j."""
        return (self.grid[j + 1] - self.grid[j]) * self.substeps_per_cell

    @property
    def horizon(self):
        return self.N * self.Ts

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class NlpIterate:
    X: np.ndarray  # (n_nodes, NX)
    U: np.ndarray  # (n_nodes - 1, NU)
    s: np.ndarray  # node abscissae, unwrapped
    x0_bar: np.ndarray

    def copy(self):
        return NlpIterate(self.X.copy(), self.U.copy(), self.s.copy(), self.x0_bar.copy())


@dataclass
class QpProblem:
    """Structured QP in deltas.

    Stage j (0..N-1): z_j = [dx_j; du_j], cost 1/2 z'H_j z + g_j'z,
    dynamics dx_{j+1} = A_j dx_j + B_j du_j + a_j, constraints
    lbc_j <= C_j dx_j + D_j du_j <= ubc_j. Terminal: 1/2 dx_N'H_N dx_N + g_N'dx_N
    and lbN <= C_N dx_N + D_N du_{N-1} <= ubN. Embedding dx_0 = x0_delta.
    """

    H: list
    g: list
    A: list
    B: list
    a: list
    C: list
    D: list
    lbc: list
    ubc: list
    H_N: np.ndarray
    g_N: np.ndarray
    C_N: np.ndarray
    D_N: np.ndarray
    lbN: np.ndarray
    ubN: np.ndarray
    x0_delta: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.A)

    @property
    def nx(self):
        return self.A[0].shape[0]

    @property
    def nu(self):
        return self.B[0].shape[1]

    def to_dict(self):
        def lst(v):
            return [np.asarray(b).tolist() for b in v]

        return {
            "format": "lbnmpc-qp",
            "version": 1,
            **{k: lst(getattr(self, k)) for k in ("H", "g", "A", "B", "a", "C", "D", "lbc", "ubc")},
            **{k: np.asarray(getattr(self, k)).tolist() for k in ("H_N", "g_N", "C_N", "D_N", "lbN", "ubN", "x0_delta")},
        }

    @classmethod
    def from_dict(cls, d):
        def arrs(k):
            return [np.array(b, dtype=float) for b in d[k]]

        return cls(
            *(arrs(k) for k in ("H", "g", "A", "B", "a", "C", "D", "lbc", "ubc")),
            *(np.array(d[k], dtype=float) for k in ("H_N", "g_N", "C_N", "D_N", "lbN", "ubN", "x0_delta")),
        )

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def stage_residual(x, u):
    """h_j = [gamma_rate, tau_v_rate, beta_rate, eta]."""
    u = np.asarray(u, dtype=float)
    return np.array([u[0], u[2], u[1], u[3]])


def terminal_residual(x, ref=(0.0, 0.0), heading="heading"):
    x = np.asarray(x, dtype=float)
    e = x[3] + (math.atan2(x[1], x[0]) if heading == "course" else 0.0)
    return np.array([x[8], e - ref[0], x[4] - ref[1]])


def terminal_jacobian(x, heading="heading"):
    J = _JH_TERM.copy()
    if heading == "course":
        vx, vy = float(x[0]), float(x[1])
        d = vx * vx + vy * vy
        J[1, 0] = -vy / d
        J[1, 1] = vx / d
    return J


def weighted_cost(h, W):
    return 0.5 * float(np.sum(np.asarray(W) * h * h))


# Jacobians of the residuals are constant selections
_JH_STAGE = np.zeros((4, NX + NU))
_JH_STAGE[0, NX + 0] = _JH_STAGE[1, NX + 2] = _JH_STAGE[2, NX + 1] = _JH_STAGE[3, NX + 3] = 1.0
_JH_TERM = np.zeros((3, NX))
_JH_TERM[0, 8] = _JH_TERM[1, 3] = _JH_TERM[2, 4] = 1.0

_C_STAGE = np.zeros((N_STAGE_ROWS, NX))
_D_STAGE = np.zeros((N_STAGE_ROWS, NU))
for _row, _slot in enumerate((0, 3, 5, 6, 7)):
    _C_STAGE[_row, _slot] = 1.0
_D_STAGE[5, 0] = _D_STAGE[6, 2] = _D_STAGE[7, 1] = _D_STAGE[8, 3] = 1.0
_C_STAGE[9, 4] = 1.0
_D_STAGE[9, 3] = 1.0
_C_TERM = np.zeros((N_TERM_ROWS, NX))
_D_TERM = np.zeros((N_TERM_ROWS, NU))
for _row, _slot in enumerate((0, 3, 5, 6, 7, 4)):
    _C_TERM[_row, _slot] = 1.0
_D_TERM[5, 3] = 1.0


def constraint_jacobians():
    """(C, D, C_N, D_N): constraint rows are linear in (x, u)."""
    return _C_STAGE.copy(), _D_STAGE.copy(), _C_TERM.copy(), _D_TERM.copy()


def reduced_bounds(config, track, s):
    lb, ub = bounds_at(track, s)
    return lb + config.bound_reduction, ub - config.bound_reduction


def speed_cap(config, track, s):
    """Largest speed at ``s`` from which the car can still brake down to the
    steady cornering speed of every point within the lookahead."""
    cap = config.stage_ub[0]
    if config.envelope_lat_accel <= 0.0:
        return cap
    d = np.arange(0.0, config.envelope_lookahead + 1e-9, 0.5)
    q = s + d
    q = np.mod(q, track.length) if track.closed else np.clip(q, track.s[0], track.s[-1])
    z = np.abs(np.interp(q, track.s, track.curvature))
    with np.errstate(divide="ignore"):
        v2 = np.where(z > 1e-9, config.envelope_lat_accel / z, np.inf) + 2.0 * config.envelope_brake * d
    return float(np.clip(math.sqrt(v2.min()), config.stage_lb[0], cap))


def _node_bounds(config, track, s, terminal=False):
    lb, ub = reduced_bounds(config, track, s)
    if terminal or config.speed_envelope == "all":
        return lb, ub, speed_cap(config, track, s)
    return lb, ub


def constraint_eval(x, u, e_y_bounds=None, config=OcpConfig(), terminal=False):
    """Constraint row values; with ``e_y_bounds`` also the (lb, ub) vectors.

    The terminal e_y row uses the slack of the last interval (``u``). A third
    entry in ``e_y_bounds`` caps the speed row.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if terminal:
        r = _C_TERM @ x + _D_TERM @ u
    else:
        r = _C_STAGE @ x + _D_STAGE @ u
    if e_y_bounds is None:
        return r
    if terminal:
        lb = np.array([*config.stage_lb[:5], e_y_bounds[0]])
        ub = np.array([*config.stage_ub[:5], e_y_bounds[1]])
    else:
        lb = np.array([*config.stage_lb, e_y_bounds[0]])
        ub = np.array([*config.stage_ub, e_y_bounds[1]])
    if len(e_y_bounds) > 2:
        ub[0] = min(ub[0], e_y_bounds[2])
    return r, lb, ub


def transcribe(config, track, models, iterate):
    """Continuity residuals a_j = phi(x_j, u_j) - x_{j+1}.

    ``models`` is one acceleration model for all intervals or a list with one
    entry per interval.
    """
    n = config.n_nodes
    _check_iterate(config, iterate)
    models = _per_interval(models, n - 1)
    a = np.empty((n - 1, NX))
    for j in range(n - 1):
        xn = dynamics.integrate_interval(iterate.X[j], iterate.U[j], iterate.s[j], iterate.s[j + 1],
                                         models[j], track, config.substeps(j))
        a[j] = xn - iterate.X[j + 1]
    return a


def linearize(config, track, models, iterate):
    n = config.n_nodes
    _check_iterate(config, iterate)
    models = _per_interval(models, n - 1)
    W = np.diag(config.W)
    WN = np.diag(config.W_N)
    reg = config.regularization
    H_stage = _JH_STAGE.T @ W @ _JH_STAGE + reg * np.eye(NX + NU)
    Hs, gs, As, Bs, as_, Cs, Ds, lbs, ubs = ([] for _ in range(9))
    for j in range(n - 1):
        x, u = iterate.X[j], iterate.U[j]
        xn, A, B = dynamics.sensitivities(x, u, iterate.s[j], iterate.s[j + 1], models[j], track,
                                          config.substeps(j))
        As.append(A)
        Bs.append(B)
        as_.append(xn - iterate.X[j + 1])
        Hs.append(H_stage)
        gs.append(_JH_STAGE.T @ (W @ stage_residual(x, u)))
        r, lb, ub = constraint_eval(x, u, _node_bounds(config, track, iterate.s[j]), config)
        lbc, ubc = lb - r, ub - r
        if j == 0:
            # x_0 is pinned by the embedding; state-only rows carry no information
            lbc[:5] = -np.inf
            ubc[:5] = np.inf
        Cs.append(_C_STAGE)
        Ds.append(_D_STAGE)
        lbs.append(lbc)
        ubs.append(ubc)
    xN = iterate.X[-1]
    JN = terminal_jacobian(xN, config.terminal_heading)
    H_N = JN.T @ WN @ JN + reg * np.eye(NX)
    g_N = JN.T @ (WN @ terminal_residual(xN, config.terminal_ref, config.terminal_heading))
    rN, lbN, ubN = constraint_eval(xN, iterate.U[-1], _node_bounds(config, track, iterate.s[-1], terminal=True),
                                   config, terminal=True)
    return QpProblem(
        Hs, gs, As, Bs, as_, Cs, Ds, lbs, ubs,
        H_N, g_N, _C_TERM, _D_TERM, lbN - rN, ubN - rN,
        iterate.x0_bar - iterate.X[0],
    )


def nlp_cost(config, iterate):
    c = sum(weighted_cost(stage_residual(x, u), config.W) for x, u in zip(iterate.X[:-1], iterate.U))
    return c + weighted_cost(terminal_residual(iterate.X[-1], config.terminal_ref, config.terminal_heading),
                             config.W_N)


def constraint_violation(config, track, iterate):
    """l1 norm of bound violations over all nodes (node-0 state rows skipped)."""
    tot = 0.0
    for j in range(config.n_nodes - 1):
        r, lb, ub = constraint_eval(iterate.X[j], iterate.U[j],
                                    _node_bounds(config, track, iterate.s[j]), config)
        v = np.maximum(0.0, r - ub) + np.maximum(0.0, lb - r)
        if j == 0:
            v[:5] = 0.0
        tot += float(v.sum())
    r, lb, ub = constraint_eval(iterate.X[-1], iterate.U[-1],
                                _node_bounds(config, track, iterate.s[-1], terminal=True), config, terminal=True)
    return tot + float((np.maximum(0.0, r - ub) + np.maximum(0.0, lb - r)).sum())


def _per_interval(models, n):
    if isinstance(models, (list, tuple)):
        if len(models) != n:
            raise InvalidArgument(f"need {n} interval models, got {len(models)}")
        return list(models)
    return [models] * n


def _check_iterate(config, it):
    n = config.n_nodes
    if it.X.shape != (n, NX) or it.U.shape != (n - 1, NU) or it.s.shape != (n,):
        raise InvalidArgument("iterate dimensions do not match the grid")
