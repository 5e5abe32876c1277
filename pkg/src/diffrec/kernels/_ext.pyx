# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see numpy_backend for semantics).

Row reductions accumulate in double regardless of input dtype; results agree
with the numpy backend to normal float tolerance, not bit-for-bit.
"""

import numpy as np

cimport cython
from libc.math cimport exp, expf, sqrt, tanh, tanhf

ctypedef fused real:
    float
    double

cdef double _GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double _GELU_A = 0.044715


def _softmax2d(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double mx, s
    with nogil:
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                if real is float:
                    out[i, j] = expf(x[i, j] - <float>mx)
                else:
                    out[i, j] = exp(x[i, j] - mx)
                s += out[i, j]
            for j in range(cols):
                out[i, j] = <real>(out[i, j] / s)


def _softmax_grad2d(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] gx):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], i, j
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += gy[i, j] * y[i, j]
            for j in range(cols):
                gx[i, j] = <real>(y[i, j] * (gy[i, j] - dot))


def _layer_norm2d(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps,
                  real[:, ::1] y, real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double mu, var, d, r
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                var += d * d
            var /= cols
            r = 1.0 / sqrt(var + eps)
            mean[i] = <real>mu
            rstd[i] = <real>r
            for j in range(cols):
                y[i, j] = <real>(((x[i, j] - mu) * r) * gamma[j] + beta[j])


def _layer_norm_grad2d(real[:, ::1] x, real[::1] mean, real[::1] rstd,
                       real[::1] gamma, real[:, ::1] gy,
                       real[:, ::1] gx, double[::1] ggamma, double[::1] gbeta):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double m1, m2, xhat, gyg, r
    with nogil:
        for i in range(rows):
            r = rstd[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                xhat = (x[i, j] - mean[i]) * r
                gyg = gy[i, j] * gamma[j]
                m1 += gyg
                m2 += gyg * xhat
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                xhat = (x[i, j] - mean[i]) * r
                gyg = gy[i, j] * gamma[j]
                gx[i, j] = <real>(r * (gyg - m1 - xhat * m2))
                ggamma[j] += gy[i, j] * xhat
                gbeta[j] += gy[i, j]


def _gelu1d(real[::1] x, real[::1] y, real[::1] t_out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef real t
    with nogil:
        for i in range(n):
            if real is float:
                t = tanhf(<float>_GELU_C * (x[i] + <float>_GELU_A * x[i] * x[i] * x[i]))
            else:
                t = tanh(_GELU_C * (x[i] + _GELU_A * x[i] * x[i] * x[i]))
            t_out[i] = t
            y[i] = <real>(0.5 * x[i] * (1.0 + t))


def _gelu_grad1d(real[::1] x, real[::1] t, real[::1] gy, real[::1] gx):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double slope
    with nogil:
        for i in range(n):
            slope = (0.5 * (1.0 + t[i])
                     + 0.5 * x[i] * (1.0 - t[i] * t[i])
                     * _GELU_C * (1.0 + 3.0 * _GELU_A * x[i] * x[i]))
            gx[i] = <real>(gy[i] * slope)


def _adam1d(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
            double lr, double b1, double b2, double eps, double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mhat, vhat
    with nogil:
        for i in range(n):
            m[i] = <real>(b1 * m[i] + (1.0 - b1) * g[i])
            v[i] = <real>(b2 * v[i] + (1.0 - b2) * g[i] * g[i])
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            p[i] = <real>(p[i] - lr * mhat / (sqrt(vhat) + eps))


def _embedding_grad2d(real[:, ::1] gtable, long long[::1] ids, real[:, ::1] gout):
    cdef Py_ssize_t n = ids.shape[0], cols = gout.shape[1], i, j, row
    with nogil:
        for i in range(n):
            row = ids[i]
            for j in range(cols):
                gtable[row, j] += gout[i, j]


def softmax_last(x):
    x = np.ascontiguousarray(x)
    cols = x.shape[x.ndim - 1]
    x2 = x.reshape(-1, cols)
    out = np.empty_like(x2)
    _softmax2d(x2, out)
    return out.reshape(x.shape)


def softmax_last_grad(y, gy):
    y = np.ascontiguousarray(y)
    gy = np.ascontiguousarray(gy)
    cols = y.shape[y.ndim - 1]
    y2 = y.reshape(-1, cols)
    gy2 = gy.reshape(-1, cols)
    gx = np.empty_like(y2)
    _softmax_grad2d(y2, gy2, gx)
    return gx.reshape(y.shape)


def layer_norm(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    cols = x.shape[x.ndim - 1]
    x2 = x.reshape(-1, cols)
    y = np.empty_like(x2)
    mean = np.empty(x2.shape[0], dtype=x.dtype)
    rstd = np.empty(x2.shape[0], dtype=x.dtype)
    _layer_norm2d(x2, np.ascontiguousarray(gamma), np.ascontiguousarray(beta),
                  float(eps), y, mean, rstd)
    keep = x.shape[:x.ndim - 1] + (1,)
    return y.reshape(x.shape), mean.reshape(keep), rstd.reshape(keep)


def layer_norm_grad(x, mean, rstd, gamma, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    cols = x.shape[x.ndim - 1]
    x2 = x.reshape(-1, cols)
    gy2 = gy.reshape(-1, cols)
    gx = np.empty_like(x2)
    ggamma = np.zeros(cols, dtype=np.float64)
    gbeta = np.zeros(cols, dtype=np.float64)
    _layer_norm_grad2d(x2, np.ascontiguousarray(mean).ravel(),
                       np.ascontiguousarray(rstd).ravel(),
                       np.ascontiguousarray(gamma), gy2, gx, ggamma, gbeta)
    return (gx.reshape(x.shape),
            ggamma.astype(x.dtype, copy=False),
            gbeta.astype(x.dtype, copy=False))


def gelu(x):
    y, _ = gelu_fwd(x)
    return y


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    t = np.empty_like(x)
    _gelu1d(x.ravel(), y.ravel(), t.ravel())
    return y, t


def gelu_grad(x, gy, t=None):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    if t is None:
        _, t = gelu_fwd(x)
    gx = np.empty_like(x)
    _gelu_grad1d(x.ravel(), np.ascontiguousarray(t).ravel(), gy.ravel(), gx.ravel())
    return gx


def adam_update(p, g, m, v, lr, b1, b2, eps, t):
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    _adam1d(p.ravel(), np.ascontiguousarray(g).ravel(), m.ravel(), v.ravel(),
            lr, b1, b2, eps, bc1, bc2)


def embedding_grad(gtable, ids, gout):
    ids64 = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    gout2 = np.ascontiguousarray(gout).reshape(len(ids64), -1)
    _embedding_grad2d(gtable, ids64, gout2)
