"""Reference numpy implementations of the hot kernels.

These are the semantics of record: the Cython backend in ``_speedups.pyx``
must produce the same values (up to BLAS summation order). Everything is
float64 and operates on the last axis unless stated otherwise.
"""

import numpy as np
from scipy.special import erf

NAME = "python"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    return np.matmul(a, b)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    return np.where(x > 0.0, g, 0.0)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_grad(y, g):
    inner = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - inner)


def logsumexp(x):
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


def logsumexp_grad(x, z, g):
    return g[..., None] * np.exp(x - z[..., None])


def layernorm(x, gain, bias, eps):
    mu = x.mean(axis=-1)
    var = ((x - mu[..., None]) ** 2).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu[..., None]) * rstd[..., None] * gain + bias
    return y, mu, rstd


def layernorm_grad(x, gain, mu, rstd, g):
    xhat = (x - mu[..., None]) * rstd[..., None]
    gxhat = g * gain
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[..., None] * (gxhat - m1 - xhat * m2)
    lead = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=lead)
    gbias = g.sum(axis=lead)
    return gx, ggain, gbias


def l2norm(x, eps):
    n = np.sqrt((x * x).sum(axis=-1))
    denom = np.maximum(n, eps)
    return x / denom[..., None], denom


def l2norm_grad(y, denom, g):
    inner = (g * y).sum(axis=-1, keepdims=True)
    return (g - y * inner) / denom[..., None]


def conv1d(x, w):
    # x (B, Cin, L), w (Cout, Cin, k) with odd k; zero-padded to same length.
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    return np.einsum("bclk,ock->bol", win, w, optimize=True)


def conv1d_grad(x, w, g):
    k = w.shape[2]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    gw = np.einsum("bclk,bol->ock", win, g, optimize=True)
    gp = np.pad(g, ((0, 0), (0, 0), (p, p)))
    gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=2)
    gx = np.einsum("bolk,ock->bcl", gwin, w[:, :, ::-1], optimize=True)
    return gx, gw
