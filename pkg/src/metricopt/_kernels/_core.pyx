"""Compiled kernels for the dense-MLP hot path.

Mirror of `_numpy_kernels` (same names, signatures and semantics). Inputs
must be C-contiguous float64; `metricopt.nn` guarantees that. Loops are
ordered so the innermost index walks contiguous memory, which lets the C
compiler vectorize them.
"""

import numpy as np

from libc.math cimport exp, sqrt


def affine_fwd(double[:, ::1] x, double[:, ::1] w, double[::1] b):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t ni = x.shape[1]
    cdef Py_ssize_t no = w.shape[1]
    out_arr = np.empty((n, no), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j, k
    cdef double xv
    for i in range(n):
        for j in range(no):
            y[i, j] = b[j]
        for k in range(ni):
            xv = x[i, k]
            for j in range(no):
                y[i, j] += xv * w[k, j]
    return out_arr


def affine_bwd(double[:, ::1] x, double[:, ::1] w, double[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t ni = x.shape[1]
    cdef Py_ssize_t no = w.shape[1]
    dw_arr = np.zeros((ni, no), dtype=np.float64)
    db_arr = np.zeros(no, dtype=np.float64)
    dx_arr = np.empty((n, ni), dtype=np.float64)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, k
    cdef double xv, acc
    for i in range(n):
        for j in range(no):
            db[j] += dy[i, j]
        for k in range(ni):
            xv = x[i, k]
            for j in range(no):
                dw[k, j] += xv * dy[i, j]
        for k in range(ni):
            acc = 0.0
            for j in range(no):
                acc += dy[i, j] * w[k, j]
            dx[i, k] = acc
    return dw_arr, db_arr, dx_arr


def leaky_relu_fwd(double[:, ::1] x, double slope):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            y[i, j] = v if v >= 0.0 else slope * v
    return out_arr


def leaky_relu_bwd(double[:, ::1] x, double slope, double[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            dx[i, j] = dy[i, j] if x[i, j] >= 0.0 else slope * dy[i, j]
    return out_arr


def sigmoid_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double v, e
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            if v >= 0.0:
                y[i, j] = 1.0 / (1.0 + exp(-v))
            else:
                e = exp(v)
                y[i, j] = e / (1.0 + e)
    return out_arr


def sigmoid_bwd(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t m = y.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            dx[i, j] = dy[i, j] * y[i, j] * (1.0 - y[i, j])
    return out_arr


def bn_train_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    y_arr = np.empty((n, m), dtype=np.float64)
    mean_arr = np.zeros(m, dtype=np.float64)
    var_arr = np.zeros(m, dtype=np.float64)
    xhat_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef Py_ssize_t i, j
    cdef double d, inv
    for i in range(n):
        for j in range(m):
            mean[j] += x[i, j]
    for j in range(m):
        mean[j] /= n
    for i in range(n):
        for j in range(m):
            d = x[i, j] - mean[j]
            var[j] += d * d
    for j in range(m):
        var[j] /= n
    for i in range(n):
        for j in range(m):
            inv = 1.0 / sqrt(var[j] + eps)
            xhat[i, j] = (x[i, j] - mean[j]) * inv
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_arr, mean_arr, var_arr, xhat_arr


def bn_train_bwd(double[:, ::1] xhat, double[::1] var, double[::1] gamma,
                 double eps, double[:, ::1] dy):
    cdef Py_ssize_t n = dy.shape[0]
    cdef Py_ssize_t m = dy.shape[1]
    dgamma_arr = np.zeros(m, dtype=np.float64)
    dbeta_arr = np.zeros(m, dtype=np.float64)
    dx_arr = np.empty((n, m), dtype=np.float64)
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double[:, ::1] dx = dx_arr
    # Per-feature sums of dxhat and dxhat*xhat, with dxhat = dy*gamma.
    sum1_arr = np.zeros(m, dtype=np.float64)
    sum2_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] sum1 = sum1_arr
    cdef double[::1] sum2 = sum2_arr
    cdef Py_ssize_t i, j
    cdef double dxh, inv
    for i in range(n):
        for j in range(m):
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
            dxh = dy[i, j] * gamma[j]
            sum1[j] += dxh
            sum2[j] += dxh * xhat[i, j]
    for i in range(n):
        for j in range(m):
            inv = 1.0 / sqrt(var[j] + eps)
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = (inv / n) * (n * dxh - sum1[j] - xhat[i, j] * sum2[j])
    return dgamma_arr, dbeta_arr, dx_arr


def bn_eval_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta,
                double[::1] rmean, double[::1] rvar, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double inv
    for i in range(n):
        for j in range(m):
            inv = 1.0 / sqrt(rvar[j] + eps)
            y[i, j] = (x[i, j] - rmean[j]) * inv * gamma[j] + beta[j]
    return out_arr


def bn_eval_bwd(double[:, ::1] x, double[::1] rmean, double[::1] rvar,
                double[::1] gamma, double eps, double[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    dgamma_arr = np.zeros(m, dtype=np.float64)
    dbeta_arr = np.zeros(m, dtype=np.float64)
    dx_arr = np.empty((n, m), dtype=np.float64)
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j
    cdef double inv
    for i in range(n):
        for j in range(m):
            inv = 1.0 / sqrt(rvar[j] + eps)
            dgamma[j] += dy[i, j] * (x[i, j] - rmean[j]) * inv
            dbeta[j] += dy[i, j]
            dx[i, j] = dy[i, j] * gamma[j] * inv
    return dgamma_arr, dbeta_arr, dx_arr


def pairwise_sqdist(double[:, ::1] e):
    cdef Py_ssize_t n = e.shape[0]
    cdef Py_ssize_t m = e.shape[1]
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] d = out_arr
    cdef Py_ssize_t a, b, k
    cdef double acc, diff
    for a in range(n):
        for b in range(a + 1, n):
            acc = 0.0
            for k in range(m):
                diff = e[a, k] - e[b, k]
                acc += diff * diff
            d[a, b] = acc
            d[b, a] = acc
    return out_arr
