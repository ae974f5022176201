# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels mirroring numpy_backend.

The win is on the small arrays that dominate per-step sampling work:
dispatch goes straight to C loops (or BLAS dgemm for matmul) instead of
through numpy ufunc machinery. Semantics must stay identical to the numpy
reference; the parity tests compare both backends element-wise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef void _gemm(double* a, double* b, double* c, int m, int k, int n) noexcept nogil:
    # Row-major C (m,n) = A (m,k) @ B (k,n) via column-major C^T = B^T A^T.
    cdef double alpha = 1.0, beta = 0.0
    dgemm("N", "N", &n, &m, &k, &alpha, b, &n, a, &k, &beta, c, &n)


def matmul(a, b):
    cdef cnp.ndarray[double, ndim=2] a2, b2, c2
    cdef cnp.ndarray[double, ndim=3] a3, b3, c3
    cdef int i, m, k, n, batch
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 2 and b.ndim == 2:
        a2, b2 = a, b
        m, k, n = a2.shape[0], a2.shape[1], b2.shape[1]
        c2 = np.empty((m, n))
        if m and k and n:
            _gemm(&a2[0, 0], &b2[0, 0], &c2[0, 0], m, k, n)
        elif m and n:
            c2[:] = 0.0
        return c2
    if a.ndim == 3 and b.ndim == 2:
        a3, b2 = a, b
        batch, m, k = a3.shape[0], a3.shape[1], a3.shape[2]
        n = b2.shape[1]
        c3 = np.empty((batch, m, n))
        for i in range(batch):
            _gemm(&a3[i, 0, 0], &b2[0, 0], &c3[i, 0, 0], m, k, n)
        return c3
    if a.ndim == 3 and b.ndim == 3:
        a3, b3 = a, b
        batch, m, k = a3.shape[0], a3.shape[1], a3.shape[2]
        n = b3.shape[2]
        c3 = np.empty((batch, m, n))
        for i in range(batch):
            _gemm(&a3[i, 0, 0], &b3[i, 0, 0], &c3[i, 0, 0], m, k, n)
        return c3
    if a.ndim == 2 and b.ndim == 3:
        a2, b3 = a, b
        m, k = a2.shape[0], a2.shape[1]
        batch, n = b3.shape[0], b3.shape[2]
        c3 = np.empty((batch, m, n))
        for i in range(batch):
            _gemm(&a2[0, 0], &b3[i, 0, 0], &c3[i, 0, 0], m, k, n)
        return c3
    return np.matmul(a, b)


def relu(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] xf = x.ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, size = xf.shape[0]
    for i in range(size):
        out[i] = xf[i] if xf[i] > 0.0 else 0.0
    return out.reshape(x.shape)


def relu_grad(x, g):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] xf = x.ravel(), gf = g.ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, size = xf.shape[0]
    for i in range(size):
        out[i] = gf[i] if xf[i] > 0.0 else 0.0
    return out.reshape(x.shape)


def gelu(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] xf = x.ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, size = xf.shape[0]
    for i in range(size):
        out[i] = 0.5 * xf[i] * (1.0 + erf(xf[i] * INV_SQRT2))
    return out.reshape(x.shape)


def gelu_grad(x, g):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] xf = x.ravel(), gf = g.ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, size = xf.shape[0]
    cdef double cdf, pdf
    for i in range(size):
        cdf = 0.5 * (1.0 + erf(xf[i] * INV_SQRT2))
        pdf = INV_SQRT2PI * exp(-0.5 * xf[i] * xf[i])
        out[i] = gf[i] * (cdf + xf[i] * pdf)
    return out.reshape(x.shape)


def softmax(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(xr)
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    cdef double m, s
    for r in range(rows):
        m = xr[r, 0]
        for c in range(1, cols):
            if xr[r, c] > m:
                m = xr[r, c]
        s = 0.0
        for c in range(cols):
            out[r, c] = exp(xr[r, c] - m)
            s += out[r, c]
        for c in range(cols):
            out[r, c] /= s
    return out.reshape(x.shape)


def softmax_grad(y, g):
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] yr = y.reshape(-1, y.shape[y.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] gr = g.reshape(-1, g.shape[g.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(yr)
    cdef Py_ssize_t r, c, rows = yr.shape[0], cols = yr.shape[1]
    cdef double inner
    for r in range(rows):
        inner = 0.0
        for c in range(cols):
            inner += gr[r, c] * yr[r, c]
        for c in range(cols):
            out[r, c] = yr[r, c] * (gr[r, c] - inner)
    return out.reshape(y.shape)


def logsumexp(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=1] out = np.empty(xr.shape[0])
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    cdef double m, s
    for r in range(rows):
        m = xr[r, 0]
        for c in range(1, cols):
            if xr[r, c] > m:
                m = xr[r, c]
        s = 0.0
        for c in range(cols):
            s += exp(xr[r, c] - m)
        out[r] = m + log(s)
    return out.reshape(x.shape[:-1])


def logsumexp_grad(x, z, g):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=1] zr = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] gr = np.ascontiguousarray(g, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(xr)
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    for r in range(rows):
        for c in range(cols):
            out[r, c] = gr[r] * exp(xr[r, c] - zr[r])
    return out.reshape(x.shape)


def layernorm(x, gain, bias, double eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=1] gn = np.ascontiguousarray(gain, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] bs = np.ascontiguousarray(bias, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] y = np.empty_like(xr)
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    cdef cnp.ndarray[double, ndim=1] mu = np.empty(rows), rstd = np.empty(rows)
    cdef double m, v, d
    for r in range(rows):
        m = 0.0
        for c in range(cols):
            m += xr[r, c]
        m /= cols
        v = 0.0
        for c in range(cols):
            d = xr[r, c] - m
            v += d * d
        v /= cols
        mu[r] = m
        rstd[r] = 1.0 / sqrt(v + eps)
        for c in range(cols):
            y[r, c] = (xr[r, c] - m) * rstd[r] * gn[c] + bs[c]
    return y.reshape(x.shape), mu.reshape(x.shape[:-1]), rstd.reshape(x.shape[:-1])


def layernorm_grad(x, gain, mu, rstd, g):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] gr = g.reshape(-1, g.shape[g.ndim - 1])
    cdef cnp.ndarray[double, ndim=1] gn = np.ascontiguousarray(gain, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] mur = np.ascontiguousarray(mu, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] rstdr = np.ascontiguousarray(rstd, dtype=np.float64).ravel()
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    cdef cnp.ndarray[double, ndim=2] gx = np.empty_like(xr)
    cdef cnp.ndarray[double, ndim=1] ggain = np.zeros(cols), gbias = np.zeros(cols)
    cdef double m1, m2, xhat, gxhat
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            xhat = (xr[r, c] - mur[r]) * rstdr[r]
            gxhat = gr[r, c] * gn[c]
            m1 += gxhat
            m2 += gxhat * xhat
            ggain[c] += gr[r, c] * xhat
            gbias[c] += gr[r, c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xhat = (xr[r, c] - mur[r]) * rstdr[r]
            gxhat = gr[r, c] * gn[c]
            gx[r, c] = rstdr[r] * (gxhat - m1 - xhat * m2)
    return gx.reshape(x.shape), ggain, gbias


def l2norm(x, double eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = x.reshape(-1, x.shape[x.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] y = np.empty_like(xr)
    cdef Py_ssize_t r, c, rows = xr.shape[0], cols = xr.shape[1]
    cdef cnp.ndarray[double, ndim=1] denom = np.empty(rows)
    cdef double s
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += xr[r, c] * xr[r, c]
        s = sqrt(s)
        denom[r] = s if s > eps else eps
        for c in range(cols):
            y[r, c] = xr[r, c] / denom[r]
    return y.reshape(x.shape), denom.reshape(x.shape[:-1])


def l2norm_grad(y, denom, g):
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] yr = y.reshape(-1, y.shape[y.ndim - 1])
    cdef cnp.ndarray[double, ndim=2] gr = g.reshape(-1, g.shape[g.ndim - 1])
    cdef cnp.ndarray[double, ndim=1] dn = np.ascontiguousarray(denom, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(yr)
    cdef Py_ssize_t r, c, rows = yr.shape[0], cols = yr.shape[1]
    cdef double inner
    for r in range(rows):
        inner = 0.0
        for c in range(cols):
            inner += gr[r, c] * yr[r, c]
        for c in range(cols):
            out[r, c] = (gr[r, c] - yr[r, c] * inner) / dn[r]
    return out.reshape(y.shape)


def conv1d(x, w):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] xa = x, wa = w
    cdef Py_ssize_t B = xa.shape[0], Cin = xa.shape[1], L = xa.shape[2]
    cdef Py_ssize_t Cout = wa.shape[0], k = wa.shape[2], p = (k - 1) // 2
    cdef cnp.ndarray[double, ndim=3] y = np.zeros((B, Cout, L))
    cdef Py_ssize_t b, o, c, l, j, src
    cdef double acc
    for b in range(B):
        for o in range(Cout):
            for l in range(L):
                acc = 0.0
                for c in range(Cin):
                    for j in range(k):
                        src = l + j - p
                        if 0 <= src < L:
                            acc += xa[b, c, src] * wa[o, c, j]
                y[b, o, l] = acc
    return y


def conv1d_grad(x, w, g):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] xa = x, wa = w, ga = g
    cdef Py_ssize_t B = xa.shape[0], Cin = xa.shape[1], L = xa.shape[2]
    cdef Py_ssize_t Cout = wa.shape[0], k = wa.shape[2], p = (k - 1) // 2
    cdef cnp.ndarray[double, ndim=3] gx = np.zeros((B, Cin, L))
    cdef cnp.ndarray[double, ndim=3] gw = np.zeros((Cout, Cin, k))
    cdef Py_ssize_t b, o, c, l, j, src
    for b in range(B):
        for o in range(Cout):
            for l in range(L):
                for c in range(Cin):
                    for j in range(k):
                        src = l + j - p
                        if 0 <= src < L:
                            gx[b, c, src] += ga[b, o, l] * wa[o, c, j]
                            gw[o, c, j] += ga[b, o, l] * xa[b, c, src]
    return gx, gw
