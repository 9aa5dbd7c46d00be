"""Pure-Python reference implementation of the hot kernels.

The compiled ``_core`` extension exposes the same functions with the same
signatures; :mod:`lbnmpc.core` picks one at import time.

Layouts
-------
state ``x``  : [vx, vy, yaw_rate, e_theta, e_y, gamma, beta, tau_v, t]
input ``u``  : [gamma_rate, beta_rate, tau_v_rate, eta]
GP input     : [vx, vy, yaw_rate, gamma, beta, tau_v]
GP channel   : (X, alpha, p) with X the standardized training inputs (n x 6),
               alpha the solve vector and
               p = [1/lengthscale (6), x_shift (6), 1/x_scale (6), y_shift, y_scale]
nominal      : [m, Iz, lf, lr, Bf, Cf, Df, Br, Cr, Dr, k_tv, h_cg, g,
                gamma_max, load_transfer, combined_slip]
"""

import math

import numpy as np

from .errors import SingularityError

NX = 9
NU = 4
NGP = 6
# state slots feeding the GP input, in GP-input order
GP_SLOTS = (0, 1, 2, 5, 6, 7)

KIND_GP = 0
KIND_NOMINAL = 1

S_DOT_MIN = 0.1
DEN_MIN = 1e-6


def kernel_vector(X, q, inv_ls):
    diff = (q - X) * inv_ls
    return np.exp(-np.einsum("ij,ij->i", diff, diff))


def gram(X, inv_ls):
    n = X.shape[0]
    K = np.empty((n, n))
    # exact pairwise differences, chunked to bound memory
    step = max(1, 2_000_000 // max(n * X.shape[1], 1))
    for lo in range(0, n, step):
        diff = (X[lo:lo + step, None, :] - X[None, :, :]) * inv_ls
        K[lo:lo + step] = np.exp(-np.einsum("ijk,ijk->ij", diff, diff))
    return K


def gp_channel(xgp, X, alpha, p):
    """Posterior mean and its input-gradient, both in physical units."""
    inv_ls = p[0:6]
    q = (xgp - p[6:12]) * p[12:18]
    diff = (q - X) * inv_ls
    k = np.exp(-np.einsum("ij,ij->i", diff, diff))
    ka = k * alpha
    mean = p[18] + p[19] * ka.sum()
    grad = -2.0 * p[19] * (ka @ diff) * inv_ls * p[12:18]
    return mean, grad


def _magic(alpha, B, C, D):
    ba = B * alpha
    arg = C * math.atan(ba)
    return D * math.sin(arg), D * math.cos(arg) * C * B / (1.0 + ba * ba)


def nominal_accel(xgp, nom):
    """Lateral and yaw accelerations of the bicycle model, with Jacobian.

    Returns ``(acc, jac)`` with ``acc = [vy_dot, yaw_acc]`` and ``jac`` the
    2 x 6 derivative with respect to the GP input.
    """
    vx, vy, r, gamma, beta, tau = (float(v) for v in xgp)
    m, Iz, lf, lr, Bf, Cf, Df, Br, Cr, Dr, ktv, hcg, g, gmax, load, comb, smax = (
        float(v) for v in nom[:17]
    )
    # road-wheel angle saturates smoothly at the steering limit
    if smax > 0.0:
        th = math.tanh(beta / smax)
        delta, ddel = smax * th, 1.0 - th * th
    else:
        delta, ddel = beta, 1.0
    wb = lf + lr
    af = vy + lf * r
    ar = vy - lr * r
    nf = vx * vx + af * af
    nr = vx * vx + ar * ar
    alpha_f = delta - math.atan2(af, vx)
    alpha_r = -math.atan2(ar, vx)
    # d alpha / d [vx, vy, r, gamma, beta, tau]
    dalf = np.array([af / nf, -vx / nf, -lf * vx / nf, 0.0, ddel, 0.0])
    dalr = np.array([ar / nr, -vx / nr, lr * vx / nr, 0.0, 0.0, 0.0])

    sf, dsf, sr, dsr = 1.0, 0.0, 1.0, 0.0
    if load:
        fzf = m * g * lr / wb
        fzr = m * g * lf / wb
        sf = 1.0 - m * hcg * gamma / (wb * fzf)
        dsf = -m * hcg / (wb * fzf)
        sr = 1.0 + m * hcg * gamma / (wb * fzr)
        dsr = m * hcg / (wb * fzr)
    cr, dcr = 1.0, 0.0
    if comb:
        ratio = gamma / gmax
        if ratio * ratio < 0.9:
            cr = math.sqrt(1.0 - ratio * ratio)
            dcr = -ratio / (gmax * cr)
        else:
            cr = math.sqrt(0.1)

    mf, dmf = _magic(alpha_f, Bf, Cf, Df)
    mr, dmr = _magic(alpha_r, Br, Cr, Dr)
    fyf = sf * mf
    fyr = sr * cr * mr
    dfyf = sf * dmf * dalf
    dfyf[3] += dsf * mf
    dfyr = sr * cr * dmr * dalr
    dfyr[3] += (dsr * cr + sr * dcr) * mr

    cb = math.cos(delta)
    sb = math.sin(delta)
    acc = np.array(
        [
            (fyf * cb + fyr) / m - vx * r,
            (lf * fyf * cb - lr * fyr + ktv * tau) / Iz,
        ]
    )
    jac = np.empty((2, 6))
    jac[0] = (dfyf * cb + dfyr) / m
    jac[0, 0] -= r
    jac[0, 2] -= vx
    jac[0, 4] -= fyf * sb * ddel / m
    jac[1] = (lf * dfyf * cb - lr * dfyr) / Iz
    jac[1, 4] -= lf * fyf * sb * ddel / Iz
    jac[1, 5] += ktv / Iz
    return acc, jac


def accel(xgp, kind, X1, a1, p1, X2, a2, p2, nom):
    xgp = np.asarray(xgp, dtype=float)
    if kind == KIND_NOMINAL:
        return nominal_accel(xgp, nom)
    m1, g1 = gp_channel(xgp, X1, a1, p1)
    m2, g2 = gp_channel(xgp, X2, a2, p2)
    return np.array([m1, m2]), np.vstack([g1, g2])


def spatial_rhs(x, u, zeta, acc, jac, with_jac):
    """x' = xdot / sdot and, optionally, its Jacobians (9x9, 9x4)."""
    vx, vy, r, eth, ey = x[0], x[1], x[2], x[3], x[4]
    ce = math.cos(eth)
    se = math.sin(eth)
    den = 1.0 - zeta * ey
    if abs(den) < DEN_MIN:
        raise SingularityError("1 - zeta*e_y vanishes")
    sdot = (vx * ce - vy * se) / den
    if sdot <= S_DOT_MIN:
        raise SingularityError(f"s-dot {sdot:.3g} below guard")
    xdot = np.array(
        [
            x[5],
            acc[0],
            acc[1],
            r - zeta * sdot,
            vx * se + vy * ce,
            u[0],
            u[1],
            u[2],
            1.0,
        ]
    )
    f = xdot / sdot
    if not with_jac:
        return f, None, None
    dsdot = np.zeros(NX)
    dsdot[0] = ce / den
    dsdot[1] = -se / den
    dsdot[3] = (-vx * se - vy * ce) / den
    dsdot[4] = zeta * sdot / den
    dxdot = np.zeros((NX, NX))
    dxdot[0, 5] = 1.0
    for k, slot in enumerate(GP_SLOTS):
        dxdot[1, slot] = jac[0, k]
        dxdot[2, slot] = jac[1, k]
    dxdot[3] = -zeta * dsdot
    dxdot[3, 2] += 1.0
    dxdot[4, 0] = se
    dxdot[4, 1] = ce
    dxdot[4, 3] = vx * ce - vy * se
    fx = dxdot / sdot - np.outer(xdot, dsdot) / (sdot * sdot)
    fu = np.zeros((NX, NU))
    fu[5, 0] = fu[6, 1] = fu[7, 2] = 1.0 / sdot
    return f, fx, fu


def _stage(x, u, zeta, with_jac, kind, X1, a1, p1, X2, a2, p2, nom):
    acc, jac = accel(x[list(GP_SLOTS)], kind, X1, a1, p1, X2, a2, p2, nom)
    return spatial_rhs(x, u, zeta, acc, jac, with_jac)


def interval(x, u, zetas, h, with_sens, kind, X1, a1, p1, X2, a2, p2, nom):
    """Chain ``len(zetas)`` RK4 steps of length ``h`` with u held constant.

    Returns ``(x_next, A, B)``; ``A`` and ``B`` are ``None`` unless
    ``with_sens``. Curvature is frozen per substep at ``zetas[k]``.
    """
    x = np.array(x, dtype=float)
    u = np.asarray(u, dtype=float)
    args = (kind, X1, a1, p1, X2, a2, p2, nom)
    S = np.eye(NX) if with_sens else None
    Su = np.zeros((NX, NU)) if with_sens else None
    for zeta in zetas:
        k1, j1x, j1u = _stage(x, u, zeta, with_sens, *args)
        x2 = x + 0.5 * h * k1
        k2, j2x, j2u = _stage(x2, u, zeta, with_sens, *args)
        x3 = x + 0.5 * h * k2
        k3, j3x, j3u = _stage(x3, u, zeta, with_sens, *args)
        x4 = x + h * k3
        k4, j4x, j4u = _stage(x4, u, zeta, with_sens, *args)
        if with_sens:
            d1x = j1x @ S
            d1u = j1x @ Su + j1u
            S2 = S + 0.5 * h * d1x
            Su2 = Su + 0.5 * h * d1u
            d2x = j2x @ S2
            d2u = j2x @ Su2 + j2u
            S3 = S + 0.5 * h * d2x
            Su3 = Su + 0.5 * h * d2u
            d3x = j3x @ S3
            d3u = j3x @ Su3 + j3u
            S4 = S + h * d3x
            Su4 = Su + h * d3u
            d4x = j4x @ S4
            d4u = j4x @ Su4 + j4u
            S = S + h / 6.0 * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
            Su = Su + h / 6.0 * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x, S, Su
