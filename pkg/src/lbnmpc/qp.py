"""Structured QP solver: state condensing plus a Goldfarb-Idnani dual
active-set method, with KKT diagnostics computed independently.

Convergence measure: the dual method starts from the unconstrained minimum
and the objective is non-decreasing along the iterations (each full step
adds a violated constraint). The history is kept for inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as sp
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular
from scipy.sparse.linalg import splu

from .errors import InvalidArgument, NumericalFailure
from .ocp import QpProblem

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass
class DenseResult:
    x: np.ndarray
    lam_eq: np.ndarray  # multipliers of A_eq x = b_eq (sign: H x + g + A_eq' lam_eq + C' mu = 0)
    mu: np.ndarray  # signed inequality multipliers, mu = mu_ub - mu_lb
    status: str
    iterations: int
    objective: float
    history: list = field(default_factory=list)


@dataclass
class QpSolution:
    dx: np.ndarray  # (N+1, nx)
    du: np.ndarray  # (N, nu)
    pi: np.ndarray  # continuity duals (N, nx)
    pi_init: np.ndarray  # embedding dual (nx,)
    mu: list  # signed stage inequality duals, one array per interval
    mu_N: np.ndarray
    status: str
    iterations: int
    objective: float
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    equality: float
    inequality: float
    complementarity: float

    def max(self):
        return max(self.stationarity, self.equality, self.inequality, self.complementarity)


def _goldfarb_idnani(G, a, Nmat, b, meq, max_iter, tol):
    """min 1/2 x'Gx + a'x  s.t.  Nmat[:meq] x = b[:meq], Nmat[meq:] x >= b[meq:].

    Returns (x, lam, status, iters, history) with lam >= 0 for the
    inequalities and G x + a = Nmat' lam at the optimum.
    """
    n = G.shape[0]
    m = Nmat.shape[0]
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("QP Hessian is not positive definite") from exc
    Linv = solve_triangular(L, np.eye(n), lower=True)
    x = -cho_solve((L, True), a)
    history = [0.5 * float(x @ G @ x) + float(a @ x)]
    active = []
    u = np.zeros(0)
    sign = np.ones(m)
    row_scale = 1.0 + np.abs(b) + np.linalg.norm(Nmat, axis=1) if m else np.zeros(0)

    def factor():
        if not active:
            return Linv.T, np.zeros((0, 0))
        Bm = Linv @ (Nmat[active].T * sign[active])
        Q, R = qr(Bm, mode="full")
        return Linv.T @ Q, R[: len(active), :]

    J, R = factor()
    iters = 0
    eq_done = 0
    status = OPTIMAL
    while True:
        # pick the next constraint: equalities first, then most violated
        p = -1
        if eq_done < meq:
            p = eq_done
            eq_done += 1
            s = float(Nmat[p] @ x - b[p])
            sign[p] = -1.0 if s > 0 else 1.0
        elif m > meq:
            s_all = (Nmat[meq:] @ x - b[meq:]) / row_scale[meq:]
            k = int(np.argmin(s_all))
            if s_all[k] < -tol:
                p = meq + k
                sign[p] = 1.0
        if p < 0:
            break
        iters += 1
        if iters > max_iter:
            status = MAX_ITER
            break
        n_p = Nmat[p] * sign[p]
        b_p = b[p] * sign[p]
        u_plus = np.append(u, 0.0)
        while True:
            q = len(active)
            d = J.T @ n_p
            z = J[:, q:] @ d[q:]
            r = solve_triangular(R, d[:q], lower=False) if q else np.zeros(0)
            t1, kdrop = math.inf, -1
            for jj in range(q):
                if active[jj] >= meq and r[jj] > 1e-14:
                    ratio = u_plus[jj] / r[jj]
                    if ratio < t1:
                        t1, kdrop = ratio, jj
            zn = float(z @ n_p)
            s_p = float(n_p @ x - b_p)
            if abs(s_p) <= tol * row_scale[p] * 1e-3 and p < meq:
                # equality already satisfied and dependent: accept without a step
                t2 = 0.0 if zn > 1e-14 * (1.0 + float(n_p @ n_p)) else math.inf
                if t2 == math.inf:
                    u_plus = u_plus[:-1]
                    break
            else:
                t2 = -s_p / zn if zn > 1e-14 * (1.0 + float(n_p @ n_p)) else math.inf
            t = min(t1, t2)
            if t == math.inf:
                status = INFEASIBLE
                break
            if t2 == math.inf:
                u_plus[:q] -= t * r
                u_plus[q] += t
                del active[kdrop]
                u_plus = np.delete(u_plus, kdrop)
                J, R = factor()
                continue
            x = x + t * z
            u_plus[:q] -= t * r
            u_plus[q] += t
            history.append(0.5 * float(x @ G @ x) + float(a @ x))
            if t2 <= t1:
                active.append(p)
                u = u_plus
                J, R = factor()
                break
            del active[kdrop]
            u_plus = np.delete(u_plus, kdrop)
            J, R = factor()
        if status != OPTIMAL:
            break
        if len(u) != len(active):
            # dependent equality skipped
            continue
    lam = np.zeros(m)
    for idx, val in zip(active, u):
        lam[idx] = val * sign[idx]
    return x, lam, status, iters, history


def solve_dense(H, g, A_eq=None, b_eq=None, C=None, lb=None, ub=None, tol=1e-10, max_iter=None):
    """min 1/2 x'Hx + g'x  s.t.  A_eq x = b_eq,  lb <= C x <= ub.

    Infinite bounds are ignored. Multiplier signs follow the Lagrangian
    1/2 x'Hx + g'x + lam_eq'(A_eq x - b_eq) + mu'(C x) with mu = mu_ub - mu_lb.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    if H.shape != (n, n):
        raise InvalidArgument("H and g dimensions disagree")
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    mrows = C.shape[0]
    lb = np.full(mrows, -np.inf) if lb is None else np.asarray(lb, dtype=float).ravel()
    ub = np.full(mrows, np.inf) if ub is None else np.asarray(ub, dtype=float).ravel()
    if np.any(lb > ub):
        return DenseResult(np.zeros(n), np.zeros(b_eq.size), np.zeros(mrows), INFEASIBLE, 0, math.nan)
    lo = np.flatnonzero(np.isfinite(lb))
    hi = np.flatnonzero(np.isfinite(ub))
    Nmat = np.vstack([A_eq, C[lo], -C[hi]])
    bvec = np.concatenate([b_eq, lb[lo], -ub[hi]])
    meq = A_eq.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + Nmat.shape[0]) + 10
    Hs = 0.5 * (H + H.T)
    x, lam, status, iters, hist = _goldfarb_idnani(Hs, g, Nmat, bvec, meq, max_iter, tol)
    mu = np.zeros(mrows)
    nlo = lo.size
    mu[lo] -= lam[meq:meq + nlo]
    mu[hi] += lam[meq + nlo:]
    obj = 0.5 * float(x @ Hs @ x) + float(g @ x)
    return DenseResult(x, -lam[:meq], mu, status, iters, obj, hist)


def dense_kkt_residuals(H, g, x, lam_eq=None, mu=None, A_eq=None, b_eq=None, C=None, lb=None, ub=None):
    H = np.asarray(H, dtype=float)
    x = np.asarray(x, dtype=float)
    n = x.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    lam_eq = np.zeros(A_eq.shape[0]) if lam_eq is None else np.asarray(lam_eq, dtype=float)
    mu = np.zeros(C.shape[0]) if mu is None else np.asarray(mu, dtype=float)
    grad = H @ x + np.asarray(g, dtype=float) + A_eq.T @ lam_eq + C.T @ mu
    eq = A_eq @ x - (np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float))
    r = C @ x
    lb = np.full(r.size, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(r.size, np.inf) if ub is None else np.asarray(ub, dtype=float)
    return KktResiduals(
        _maxabs(grad), _maxabs(eq), _max_violation(r, lb, ub), _complementarity(r, mu, lb, ub)
    )


def _maxabs(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _max_violation(r, lb, ub):
    if not np.size(r):
        return 0.0
    return float(np.max(np.maximum(0.0, np.maximum(r - ub, lb - r))))


def _complementarity(r, mu, lb, ub):
    if not np.size(r):
        return 0.0
    out = 0.0
    for ri, mi, lo, hi in zip(r, mu, lb, ub):
        if mi > 0:
            v = math.inf if not math.isfinite(hi) else mi * abs(hi - ri)
        elif mi < 0:
            v = math.inf if not math.isfinite(lo) else -mi * abs(ri - lo)
        else:
            continue
        out = max(out, v)
    return out


@dataclass
class Condensed:
    H: np.ndarray
    g: np.ndarray
    M: np.ndarray  # constraint rows in du
    lb: np.ndarray
    ub: np.ndarray
    E: list  # state offsets per node
    F: list  # state sensitivities to du per node


def condense(qp):
    """Eliminate the states: dx_j = E_j + F_j du."""
    N, nx, nu = qp.N, qp.nx, qp.nu
    nU = N * nu
    E = [np.asarray(qp.x0_delta, dtype=float)]
    F = [np.zeros((nx, nU))]
    for j in range(N):
        E.append(qp.A[j] @ E[j] + qp.a[j])
        Fn = qp.A[j] @ F[j]
        Fn[:, j * nu:(j + 1) * nu] += qp.B[j]
        F.append(Fn)
    Hc = np.zeros((nU, nU))
    gc = np.zeros(nU)
    rows, lbs, ubs = [], [], []
    for j in range(N):
        Hj = qp.H[j]
        Hxx, Hxu, Huu = Hj[:nx, :nx], Hj[:nx, nx:], Hj[nx:, nx:]
        gx, gu = qp.g[j][:nx], qp.g[j][nx:]
        blk = slice(j * nu, (j + 1) * nu)
        Fj = F[j][:, : j * nu]
        if j:
            Hc[: j * nu, : j * nu] += Fj.T @ Hxx @ Fj
            cross = Fj.T @ Hxu
            Hc[: j * nu, blk] += cross
            Hc[blk, : j * nu] += cross.T
            gc[: j * nu] += Fj.T @ (Hxx @ E[j] + gx)
        Hc[blk, blk] += Huu
        gc[blk] += Hxu.T @ E[j] + gu
        row = qp.C[j] @ F[j]
        row[:, blk] += qp.D[j]
        const = qp.C[j] @ E[j]
        rows.append(row)
        lbs.append(qp.lbc[j] - const)
        ubs.append(qp.ubc[j] - const)
    FN = F[N]
    Hc += FN.T @ qp.H_N @ FN
    gc += FN.T @ (qp.H_N @ E[N] + qp.g_N)
    row = qp.C_N @ FN
    row[:, (N - 1) * nu:] += qp.D_N
    const = qp.C_N @ E[N]
    rows.append(row)
    lbs.append(qp.lbN - const)
    ubs.append(qp.ubN - const)
    return Condensed(0.5 * (Hc + Hc.T), gc, np.vstack(rows), np.concatenate(lbs), np.concatenate(ubs), E, F)


def _split_mu(qp, mu):
    out, k = [], 0
    for j in range(qp.N):
        nr = qp.C[j].shape[0]
        out.append(mu[k:k + nr].copy())
        k += nr
    return out, mu[k:].copy()


def solve(qp, tol=1e-6, max_iter=None):
    """Solve a structured QP; see :class:`~lbnmpc.ocp.QpProblem` for the layout."""
    N, nx, nu = qp.N, qp.nx, qp.nu
    with np.errstate(over="ignore", invalid="ignore"):
        cd = condense(qp)
    if not (np.all(np.isfinite(cd.H)) and np.all(np.isfinite(cd.g)) and np.all(np.isfinite(cd.M))):
        raise NumericalFailure("condensed QP data not finite")
    res = solve_dense(cd.H, cd.g, C=cd.M, lb=cd.lb, ub=cd.ub, tol=1e-10, max_iter=max_iter)
    du = res.x.reshape(N, nu)
    dx = np.array([cd.E[j] + cd.F[j] @ res.x for j in range(N + 1)])
    mu, mu_N = _split_mu(qp, res.mu)
    # continuity duals by backward recursion on the state stationarity rows
    pi = np.zeros((N, nx))
    pi[N - 1] = qp.H_N @ dx[N] + qp.g_N + qp.C_N.T @ mu_N
    for j in range(N - 1, 0, -1):
        zj = np.concatenate([dx[j], du[j]])
        gx = (qp.H[j] @ zj + qp.g[j])[:nx]
        pi[j - 1] = gx + qp.A[j].T @ pi[j] + qp.C[j].T @ mu[j]
    z0 = np.concatenate([dx[0], du[0]])
    pi_init = -((qp.H[0] @ z0 + qp.g[0])[:nx] + qp.A[0].T @ pi[0] + qp.C[0].T @ mu[0])
    sol = QpSolution(dx, du, pi, pi_init, mu, mu_N, res.status, res.iterations, 0.0, res.history)
    sol.objective = objective(qp, sol)
    if sol.status == OPTIMAL and kkt_residuals(qp, sol).max() > tol:
        # condensing squares the conditioning of unstable horizons; re-solve the
        # sparse KKT system on the identified active set
        polished = polish(qp, sol)
        if polished is not None and kkt_residuals(qp, polished).max() <= tol:
            return polished
        sol.status = MAX_ITER
    return sol


def _active_rows(mu, lb, ub):
    rows = []
    for i, m in enumerate(mu):
        if m > 0 and math.isfinite(ub[i]):
            rows.append((i, ub[i]))
        elif m < 0 and math.isfinite(lb[i]):
            rows.append((i, lb[i]))
    return rows


def polish(qp, sol):
    """Solve the uncondensed equality-constrained QP on the active set of
    ``sol``. Returns a new solution, or None if the system is singular."""
    N, nx, nu = qp.N, qp.nx, qp.nu
    nz = nx + nu
    n = N * nz + nx
    Hb = sp.block_diag([*qp.H, qp.H_N], format="csr")
    g = np.concatenate([*qp.g, qp.g_N])
    rows, rhs = [], []

    def put(blocks, b):
        m = b.size
        R = sp.lil_matrix((m, n))
        for col, M in blocks:
            R[:, col:col + M.shape[1]] = M
        rows.append(R)
        rhs.append(b)

    put([(0, np.eye(nx))], np.asarray(qp.x0_delta, dtype=float))
    for j in range(N):
        put([(j * nz, np.hstack([qp.A[j], qp.B[j]])), ((j + 1) * nz, -np.eye(nx))], -qp.a[j])
    act = []
    for j in range(N):
        for i, b in _active_rows(sol.mu[j], qp.lbc[j], qp.ubc[j]):
            put([(j * nz, np.concatenate([qp.C[j][i], qp.D[j][i]])[None, :])], np.array([b]))
            act.append((j, i))
    for i, b in _active_rows(sol.mu_N, qp.lbN, qp.ubN):
        put([((N - 1) * nz + nx, qp.D_N[i][None, :]), (N * nz, qp.C_N[i][None, :])], np.array([b]))
        act.append((N, i))
    Aeq = sp.vstack(rows, format="csr")
    K = sp.bmat([[Hb, Aeq.T], [Aeq, None]], format="csc")
    try:
        with np.errstate(all="ignore"):
            z = splu(K).solve(np.concatenate([-g, *rhs]))
    except RuntimeError:
        return None
    if not np.all(np.isfinite(z)):
        return None
    w = z[:N * nz].reshape(N, nz)
    dx = np.vstack([w[:, :nx], z[N * nz:n]])
    du = w[:, nx:].copy()
    lam = z[n:]
    pi_init = lam[:nx]
    pi = lam[nx:nx + N * nx].reshape(N, nx)
    mu = [np.zeros_like(m) for m in sol.mu]
    mu_N = np.zeros_like(sol.mu_N)
    for (j, i), v in zip(act, lam[nx + N * nx:]):
        if j == N:
            mu_N[i] = v
        else:
            mu[j][i] = v
    out = QpSolution(dx, du, pi, pi_init, mu, mu_N, OPTIMAL, sol.iterations, 0.0, sol.history)
    out.objective = objective(qp, out)
    return out


def objective(qp, sol):
    f = 0.0
    for j in range(qp.N):
        z = np.concatenate([sol.dx[j], sol.du[j]])
        f += 0.5 * float(z @ qp.H[j] @ z) + float(qp.g[j] @ z)
    xN = sol.dx[qp.N]
    return f + 0.5 * float(xN @ qp.H_N @ xN) + float(qp.g_N @ xN)


def kkt_residuals(qp, sol):
    """Residuals of the full (uncondensed) KKT system.

    Lagrangian: cost + sum pi_j'(A_j dx_j + B_j du_j + a_j - dx_{j+1})
    + pi_init'(dx_0 - x0_delta) + sum mu_j'(C_j dx_j + D_j du_j) + mu_N'(C_N dx_N + D_N du_{N-1}).
    """
    N, nx = qp.N, qp.nx
    dx, du = np.asarray(sol.dx), np.asarray(sol.du)
    stat = [np.zeros(0)]
    eq = [dx[0] - qp.x0_delta]
    ineq, comp = 0.0, 0.0
    for j in range(N):
        z = np.concatenate([dx[j], du[j]])
        grad = qp.H[j] @ z + qp.g[j]
        grad[:nx] += qp.A[j].T @ sol.pi[j] + qp.C[j].T @ sol.mu[j]
        grad[nx:] += qp.B[j].T @ sol.pi[j] + qp.D[j].T @ sol.mu[j]
        grad[:nx] -= sol.pi[j - 1] if j else -sol.pi_init
        if j == N - 1:
            grad[nx:] += qp.D_N.T @ sol.mu_N
        stat.append(grad)
        eq.append(qp.A[j] @ dx[j] + qp.B[j] @ du[j] + qp.a[j] - dx[j + 1])
        r = qp.C[j] @ dx[j] + qp.D[j] @ du[j]
        ineq = max(ineq, _max_violation(r, qp.lbc[j], qp.ubc[j]))
        comp = max(comp, _complementarity(r, sol.mu[j], qp.lbc[j], qp.ubc[j]))
    gN = qp.H_N @ dx[N] + qp.g_N + qp.C_N.T @ sol.mu_N - sol.pi[N - 1]
    stat.append(gN)
    rN = qp.C_N @ dx[N] + qp.D_N @ du[N - 1]
    ineq = max(ineq, _max_violation(rN, qp.lbN, qp.ubN))
    comp = max(comp, _complementarity(rN, sol.mu_N, qp.lbN, qp.ubN))
    return KktResiduals(_maxabs(np.concatenate(stat)), _maxabs(np.concatenate(eq)), ineq, comp)


def dump(qp, path):
    qp.dump(path)


def load(path):
    return QpProblem.load(path)
