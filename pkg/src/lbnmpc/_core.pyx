# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_core_py`` function for function."""

import numpy as np

from libc.math cimport atan, atan2, cos, exp, fabs, sin, sqrt, tanh
from libc.string cimport memcpy, memset

from .errors import SingularityError

DEF NX = 9
DEF NU = 4
DEF NG = 6

cdef int[6] GP_SLOTS = [0, 1, 2, 5, 6, 7]
cdef double S_DOT_MIN = 0.1
cdef double DEN_MIN = 1e-6


def kernel_vector(const double[:, ::1] X, const double[::1] q, const double[::1] inv_ls):
    cdef Py_ssize_t n = X.shape[0], i, m
    cdef double s, d
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        s = 0.0
        for m in range(NG):
            d = (q[m] - X[i, m]) * inv_ls[m]
            s += d * d
        o[i] = exp(-s)
    return out


def gram(const double[:, ::1] X, const double[::1] inv_ls):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j, m
    cdef double s, t
    out = np.empty((n, n))
    cdef double[:, ::1] K = out
    for i in range(n):
        K[i, i] = 1.0
        for j in range(i):
            s = 0.0
            for m in range(d):
                t = (X[i, m] - X[j, m]) * inv_ls[m]
                s += t * t
            K[i, j] = exp(-s)
            K[j, i] = K[i, j]
    return out


cdef void _gp_channel(const double* xgp, const double[:, ::1] X,
                      const double[::1] alpha, const double[::1] p,
                      double* mean, double* grad) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0], i, m
    cdef double q[NG]
    cdef double diff[NG]
    cdef double acc[NG]
    cdef double s, ka, tot = 0.0
    for m in range(NG):
        q[m] = (xgp[m] - p[6 + m]) * p[12 + m]
        acc[m] = 0.0
    for i in range(n):
        s = 0.0
        for m in range(NG):
            diff[m] = (q[m] - X[i, m]) * p[m]
            s += diff[m] * diff[m]
        ka = exp(-s) * alpha[i]
        tot += ka
        for m in range(NG):
            acc[m] += ka * diff[m]
    mean[0] = p[18] + p[19] * tot
    for m in range(NG):
        grad[m] = -2.0 * p[19] * acc[m] * p[m] * p[12 + m]


cdef inline void _magic(double alpha, double B, double C, double D,
                        double* f, double* df) noexcept nogil:
    cdef double ba = B * alpha
    cdef double arg = C * atan(ba)
    f[0] = D * sin(arg)
    df[0] = D * cos(arg) * C * B / (1.0 + ba * ba)


cdef void _nominal(const double* xg, const double[::1] nom,
                   double* acc, double* jac) noexcept nogil:
    cdef double vx = xg[0], vy = xg[1], r = xg[2]
    cdef double gamma = xg[3], beta = xg[4], tau = xg[5]
    cdef double m = nom[0], Iz = nom[1], lf = nom[2], lr = nom[3]
    cdef double Bf = nom[4], Cf = nom[5], Df = nom[6]
    cdef double Br = nom[7], Cr = nom[8], Dr = nom[9]
    cdef double ktv = nom[10], hcg = nom[11], g = nom[12], gmax = nom[13]
    cdef double wb = lf + lr
    cdef double af = vy + lf * r, ar = vy - lr * r
    cdef double nf = vx * vx + af * af, nr = vx * vx + ar * ar
    cdef double smax = nom[16]
    cdef double th = tanh(beta / smax) if smax > 0.0 else 0.0
    # road-wheel angle saturates smoothly at the steering limit
    cdef double delta = smax * th if smax > 0.0 else beta
    cdef double ddel = 1.0 - th * th if smax > 0.0 else 1.0
    cdef double alpha_f = delta - atan2(af, vx)
    cdef double alpha_r = -atan2(ar, vx)
    cdef double dalf[NG]
    cdef double dalr[NG]
    cdef double dfyf[NG]
    cdef double dfyr[NG]
    cdef double sf = 1.0, dsf = 0.0, sr = 1.0, dsr = 0.0, cr = 1.0, dcr = 0.0
    cdef double fzf, fzr, ratio, mf, dmf, mr, dmr, fyf, fyr, cb, sb
    cdef int k
    dalf[0] = af / nf; dalf[1] = -vx / nf; dalf[2] = -lf * vx / nf
    dalf[3] = 0.0; dalf[4] = ddel; dalf[5] = 0.0
    dalr[0] = ar / nr; dalr[1] = -vx / nr; dalr[2] = lr * vx / nr
    dalr[3] = 0.0; dalr[4] = 0.0; dalr[5] = 0.0
    if nom[14] != 0.0:
        fzf = m * g * lr / wb
        fzr = m * g * lf / wb
        sf = 1.0 - m * hcg * gamma / (wb * fzf)
        dsf = -m * hcg / (wb * fzf)
        sr = 1.0 + m * hcg * gamma / (wb * fzr)
        dsr = m * hcg / (wb * fzr)
    if nom[15] != 0.0:
        ratio = gamma / gmax
        if ratio * ratio < 0.9:
            cr = sqrt(1.0 - ratio * ratio)
            dcr = -ratio / (gmax * cr)
        else:
            cr = sqrt(0.1)
    _magic(alpha_f, Bf, Cf, Df, &mf, &dmf)
    _magic(alpha_r, Br, Cr, Dr, &mr, &dmr)
    fyf = sf * mf
    fyr = sr * cr * mr
    for k in range(NG):
        dfyf[k] = sf * dmf * dalf[k]
        dfyr[k] = sr * cr * dmr * dalr[k]
    dfyf[3] += dsf * mf
    dfyr[3] += (dsr * cr + sr * dcr) * mr
    cb = cos(delta)
    sb = sin(delta)
    acc[0] = (fyf * cb + fyr) / m - vx * r
    acc[1] = (lf * fyf * cb - lr * fyr + ktv * tau) / Iz
    for k in range(NG):
        jac[k] = (dfyf[k] * cb + dfyr[k]) / m
        jac[NG + k] = (lf * dfyf[k] * cb - lr * dfyr[k]) / Iz
    jac[0] -= r
    jac[2] -= vx
    jac[4] -= fyf * sb * ddel / m
    jac[NG + 4] -= lf * fyf * sb * ddel / Iz
    jac[NG + 5] += ktv / Iz


cdef void _accel(const double* xg, int kind,
                 const double[:, ::1] X1, const double[::1] a1, const double[::1] p1,
                 const double[:, ::1] X2, const double[::1] a2, const double[::1] p2,
                 const double[::1] nom, double* acc, double* jac) noexcept nogil:
    if kind == 1:
        _nominal(xg, nom, acc, jac)
    else:
        _gp_channel(xg, X1, a1, p1, &acc[0], &jac[0])
        _gp_channel(xg, X2, a2, p2, &acc[1], &jac[NG])


def nominal_accel(xgp, const double[::1] nom):
    cdef double xg[NG]
    cdef double acc[2]
    cdef double jac[2 * NG]
    cdef int k
    for k in range(NG):
        xg[k] = xgp[k]
    _nominal(xg, nom, acc, jac)
    return np.array([acc[0], acc[1]]), np.array([jac[k] for k in range(2 * NG)]).reshape(2, NG)


def gp_channel(xgp, const double[:, ::1] X, const double[::1] alpha, const double[::1] p):
    cdef double xg[NG]
    cdef double mean
    cdef double grad[NG]
    cdef int k
    for k in range(NG):
        xg[k] = xgp[k]
    _gp_channel(xg, X, alpha, p, &mean, grad)
    return mean, np.array([grad[k] for k in range(NG)])


def accel(xgp, int kind, const double[:, ::1] X1, const double[::1] a1, const double[::1] p1,
          const double[:, ::1] X2, const double[::1] a2, const double[::1] p2,
          const double[::1] nom):
    cdef double xg[NG]
    cdef double acc[2]
    cdef double jac[2 * NG]
    cdef int k
    for k in range(NG):
        xg[k] = xgp[k]
    _accel(xg, kind, X1, a1, p1, X2, a2, p2, nom, acc, jac)
    return np.array([acc[0], acc[1]]), np.array([jac[k] for k in range(2 * NG)]).reshape(2, NG)


cdef int _rhs(const double* x, const double* u, double zeta, int with_jac, int kind,
              const double[:, ::1] X1, const double[::1] a1, const double[::1] p1,
              const double[:, ::1] X2, const double[::1] a2, const double[::1] p2,
              const double[::1] nom, double* f, double* fx, double* fu) noexcept nogil:
    cdef double xg[NG]
    cdef double acc[2]
    cdef double jac[2 * NG]
    cdef double xdot[NX]
    cdef double dsdot[NX]
    cdef double vx = x[0], vy = x[1], r = x[2], eth = x[3], ey = x[4]
    cdef double ce = cos(eth), se = sin(eth)
    cdef double den = 1.0 - zeta * ey
    cdef double sdot, inv, inv2
    cdef int i, j, k
    if fabs(den) < DEN_MIN:
        return 1
    sdot = (vx * ce - vy * se) / den
    if sdot <= S_DOT_MIN:
        return 2
    for k in range(NG):
        xg[k] = x[GP_SLOTS[k]]
    _accel(xg, kind, X1, a1, p1, X2, a2, p2, nom, acc, jac)
    xdot[0] = x[5]
    xdot[1] = acc[0]
    xdot[2] = acc[1]
    xdot[3] = r - zeta * sdot
    xdot[4] = vx * se + vy * ce
    xdot[5] = u[0]
    xdot[6] = u[1]
    xdot[7] = u[2]
    xdot[8] = 1.0
    inv = 1.0 / sdot
    for i in range(NX):
        f[i] = xdot[i] * inv
    if not with_jac:
        return 0
    inv2 = inv * inv
    memset(dsdot, 0, NX * sizeof(double))
    dsdot[0] = ce / den
    dsdot[1] = -se / den
    dsdot[3] = (-vx * se - vy * ce) / den
    dsdot[4] = zeta * sdot / den
    # fx = dxdot/sdot - xdot dsdot^T / sdot^2
    for i in range(NX):
        for j in range(NX):
            fx[i * NX + j] = -xdot[i] * dsdot[j] * inv2
    fx[0 * NX + 5] += inv
    for k in range(NG):
        fx[1 * NX + GP_SLOTS[k]] += jac[k] * inv
        fx[2 * NX + GP_SLOTS[k]] += jac[NG + k] * inv
    for j in range(NX):
        fx[3 * NX + j] -= zeta * dsdot[j] * inv
    fx[3 * NX + 2] += inv
    fx[4 * NX + 0] += se * inv
    fx[4 * NX + 1] += ce * inv
    fx[4 * NX + 3] += (vx * ce - vy * se) * inv
    memset(fu, 0, NX * NU * sizeof(double))
    fu[5 * NU + 0] = inv
    fu[6 * NU + 1] = inv
    fu[7 * NU + 2] = inv
    return 0


cdef inline void _matmul(const double* A, const double* B, double* C,
                         int n, int k, int m) noexcept nogil:
    # C (n x m) = A (n x k) @ B (k x m), row-major
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i * k + l] * B[l * m + j]
            C[i * m + j] = s


def interval(x, u, zetas, double h, bint with_sens, int kind,
             const double[:, ::1] X1, const double[::1] a1, const double[::1] p1,
             const double[:, ::1] X2, const double[::1] a2, const double[::1] p2,
             const double[::1] nom):
    cdef double xc[NX]
    cdef double uc[NU]
    cdef double xs[NX]
    cdef double k1[NX]
    cdef double k2[NX]
    cdef double k3[NX]
    cdef double k4[NX]
    cdef double jx[4][NX * NX]
    cdef double ju[4][NX * NU]
    cdef double S[NX * NX]
    cdef double Su[NX * NU]
    cdef double Sk[NX * NX]
    cdef double Suk[NX * NU]
    cdef double dx[4][NX * NX]
    cdef double du[4][NX * NU]
    cdef double tmp[NX * NU]
    cdef double c
    cdef int i, j, st, stage, nz
    cdef double[::1] zv = np.ascontiguousarray(zetas, dtype=float)
    nz = zv.shape[0]
    for i in range(NX):
        xc[i] = x[i]
    for i in range(NU):
        uc[i] = u[i]
    if with_sens:
        memset(S, 0, NX * NX * sizeof(double))
        for i in range(NX):
            S[i * NX + i] = 1.0
        memset(Su, 0, NX * NU * sizeof(double))
    for st in range(nz):
        with nogil:
            c = 0.0
            # stage 1
            if _rhs(xc, uc, zv[st], with_sens, kind, X1, a1, p1, X2, a2, p2, nom,
                    k1, jx[0], ju[0]) != 0:
                with gil:
                    raise SingularityError("spatial dynamics singular")
            for i in range(NX):
                xs[i] = xc[i] + 0.5 * h * k1[i]
            if _rhs(xs, uc, zv[st], with_sens, kind, X1, a1, p1, X2, a2, p2, nom,
                    k2, jx[1], ju[1]) != 0:
                with gil:
                    raise SingularityError("spatial dynamics singular")
            for i in range(NX):
                xs[i] = xc[i] + 0.5 * h * k2[i]
            if _rhs(xs, uc, zv[st], with_sens, kind, X1, a1, p1, X2, a2, p2, nom,
                    k3, jx[2], ju[2]) != 0:
                with gil:
                    raise SingularityError("spatial dynamics singular")
            for i in range(NX):
                xs[i] = xc[i] + h * k3[i]
            if _rhs(xs, uc, zv[st], with_sens, kind, X1, a1, p1, X2, a2, p2, nom,
                    k4, jx[3], ju[3]) != 0:
                with gil:
                    raise SingularityError("spatial dynamics singular")
            if with_sens:
                for stage in range(4):
                    if stage == 0:
                        memcpy(Sk, S, NX * NX * sizeof(double))
                        memcpy(Suk, Su, NX * NU * sizeof(double))
                    else:
                        c = 0.5 * h if stage < 3 else h
                        for i in range(NX * NX):
                            Sk[i] = S[i] + c * dx[stage - 1][i]
                        for i in range(NX * NU):
                            Suk[i] = Su[i] + c * du[stage - 1][i]
                    _matmul(jx[stage], Sk, dx[stage], NX, NX, NX)
                    _matmul(jx[stage], Suk, tmp, NX, NX, NU)
                    for i in range(NX * NU):
                        du[stage][i] = tmp[i] + ju[stage][i]
                for i in range(NX * NX):
                    S[i] += h / 6.0 * (dx[0][i] + 2.0 * dx[1][i] + 2.0 * dx[2][i] + dx[3][i])
                for i in range(NX * NU):
                    Su[i] += h / 6.0 * (du[0][i] + 2.0 * du[1][i] + 2.0 * du[2][i] + du[3][i])
            for i in range(NX):
                xc[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    xn = np.array([xc[i] for i in range(NX)])
    if not with_sens:
        return xn, None, None
    A = np.array([S[i] for i in range(NX * NX)]).reshape(NX, NX)
    B = np.array([Su[i] for i in range(NX * NU)]).reshape(NX, NU)
    return xn, A, B
