# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused layer norm + activation, discounted returns.

Drop-in replacement for ``q2rl._kernels_py``; results agree to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

DEF ACT_RELU = 1
DEF ACT_TANH = 2


def ln_act_forward(const double[:, ::1] z, const double[:, ::1] gain,
                   const double[:, ::1] beta, Py_ssize_t rows_per_group,
                   int act, double eps):
    cdef Py_ssize_t n = z.shape[0], h = z.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, r, d, v
    cdef const double* zr
    cdef const double* gr
    cdef const double* br
    cdef double* xr
    cdef double* orow
    out_arr = np.empty((n, h), dtype=np.float64)
    xhat_arr = np.empty((n, h), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    if n == 0:
        return out_arr, xhat_arr, rstd_arr
    with nogil:
        for i in range(n):
            zr = &z[i, 0]
            gr = &gain[i // rows_per_group, 0]
            br = &beta[i // rows_per_group, 0]
            xr = &xhat[i, 0]
            orow = &out[i, 0]
            mean = 0.0
            for j in range(h):
                mean = mean + zr[j]
            mean = mean / h
            var = 0.0
            for j in range(h):
                d = zr[j] - mean
                xr[j] = d
                var = var + d * d
            r = 1.0 / sqrt(var / h + eps)
            rstd[i] = r
            if act == ACT_RELU:
                for j in range(h):
                    xr[j] = xr[j] * r
                    v = xr[j] * gr[j] + br[j]
                    orow[j] = v if v > 0.0 else 0.0
            else:
                for j in range(h):
                    xr[j] = xr[j] * r
                    orow[j] = xr[j] * gr[j] + br[j]
    if act == ACT_TANH:
        # libm tanh is far slower than numpy's SIMD loop
        np.tanh(out_arr, out=out_arr)
    return out_arr, xhat_arr, rstd_arr


def ln_act_backward(const double[:, ::1] dout, const double[:, ::1] out,
                    const double[:, ::1] xhat, const double[::1] rstd,
                    const double[:, ::1] gain, Py_ssize_t rows_per_group, int act):
    cdef Py_ssize_t n = dout.shape[0], h = dout.shape[1]
    cdef Py_ssize_t n_groups = gain.shape[0]
    cdef Py_ssize_t i, j
    cdef double s1, s2, c
    cdef const double* dor
    cdef const double* outr
    cdef const double* xr
    cdef const double* gr
    cdef double* dgr
    cdef double* dbr
    cdef double* dzr
    dz_arr = np.empty((n, h), dtype=np.float64)
    dgain_arr = np.zeros((n_groups, h), dtype=np.float64)
    dbeta_arr = np.zeros((n_groups, h), dtype=np.float64)
    dy_arr = np.empty(h, dtype=np.float64)
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dgain = dgain_arr
    cdef double[:, ::1] dbeta = dbeta_arr
    cdef double[::1] dyv = dy_arr
    cdef double* dy = &dyv[0]
    if n == 0:
        return dz_arr, dgain_arr, dbeta_arr
    with nogil:
        for i in range(n):
            dor = &dout[i, 0]
            outr = &out[i, 0]
            xr = &xhat[i, 0]
            gr = &gain[i // rows_per_group, 0]
            dgr = &dgain[i // rows_per_group, 0]
            dbr = &dbeta[i // rows_per_group, 0]
            dzr = &dz[i, 0]
            if act == ACT_RELU:
                for j in range(h):
                    dy[j] = dor[j] if outr[j] > 0.0 else 0.0
            elif act == ACT_TANH:
                for j in range(h):
                    dy[j] = dor[j] * (1.0 - outr[j] * outr[j])
            else:
                for j in range(h):
                    dy[j] = dor[j]
            s1 = 0.0
            s2 = 0.0
            for j in range(h):
                dgr[j] = dgr[j] + dy[j] * xr[j]
                dbr[j] = dbr[j] + dy[j]
                dy[j] = dy[j] * gr[j]
                s1 = s1 + dy[j]
                s2 = s2 + dy[j] * xr[j]
            c = rstd[i] / h
            for j in range(h):
                dzr[j] = c * (h * dy[j] - s1 - xr[j] * s2)
    return dz_arr, dgain_arr, dbeta_arr


def discounted_returns(rewards, double gamma):
    cdef const double[::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], t
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double running = 0.0
    with nogil:
        for t in range(n - 1, -1, -1):
            running = r[t] + gamma * running
            out[t] = running
    return out_arr
