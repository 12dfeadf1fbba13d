"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and return conventions match the extension exactly. Results agree
with it bit-for-bit for ``matmul``, ``zoh_hold`` and ``zero_runs``; the
reduction kernels differ only in summation order (~1 ulp).
"""

import numpy as np
from scipy.special import erf

NAME = "numpy"

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def matmul(a, b):
    """Fixed-order product: out[i, j] accumulates a[i, p] * b[p, j] for p ascending."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for p in range(a.shape[1]):
        out += a[:, p, None] * b[p]
    return out


def gelu_forward(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def dropout_scale(shape, p, key):
    n = int(np.prod(shape, dtype=np.int64))
    z = np.uint64(key) + np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
    u = (_splitmix64(z) >> np.uint64(11)).astype(np.float64) * 1.1102230246251565e-16
    return np.where(u >= p, 1.0 / (1.0 - p), 0.0).reshape(shape)


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    diff = x - mean
    var = (diff * diff).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = diff * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def layernorm_backward(grad_y, xhat, rstd, gamma):
    gh = grad_y * gamma
    s1 = gh.mean(axis=1, keepdims=True)
    s2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - s1 - xhat * s2)
    return gx, (grad_y * xhat).sum(axis=0), grad_y.sum(axis=0)


def zoh_hold(clean, mask):
    idx = np.where(mask.astype(bool), np.arange(mask.shape[0]), 0)
    np.maximum.accumulate(idx, out=idx)
    return clean[idx]


def zero_runs(mask):
    z = np.concatenate(([0], (mask == 0).astype(np.int8), [0]))
    edges = np.diff(z)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return (ends - starts).astype(np.int64)
