# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot loops.

Every function here has a numpy twin in ``_fallback`` with the same
signature; ``_backend`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, fabs, sqrt

from . import _gelu_table

cnp.import_array()

cdef double _INV_SQRT2 = 0.7071067811865476
cdef double _INV_SQRT_2PI = 0.3989422804014327

NAME = "cython"


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    """Fixed-order product: out[i, j] accumulates a[i, p] * b[p, j] for p ascending."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], q = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    out = np.zeros((n, q), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for p in range(m):
                aip = a[i, p]
                for j in range(q):
                    o[i, j] = o[i, j] + aip * b[p, j]
    return out


cdef double _TAIL_WIDTH = _gelu_table.WIDTH
cdef double _TAIL_TMAX = _gelu_table.T_MAX
cdef enum:
    _TAIL_DEG = 6
assert _gelu_table.DEGREE == _TAIL_DEG
_TAIL = np.ascontiguousarray(_gelu_table.TABLE)
cdef const double[:, ::1] _tail = _TAIL


cdef inline double _tail_ratio(double t, const double* tab) noexcept nogil:
    """erfcx(t / sqrt 2) / 2 for t >= 0."""
    cdef Py_ssize_t i, j
    cdef const double* c
    cdef double u, u2, b0, b1, b2, r, s
    if t < _TAIL_TMAX:
        i = <Py_ssize_t>(t * (1.0 / _TAIL_WIDTH))
        c = tab + i * (_TAIL_DEG + 1)
        u = (t - i * _TAIL_WIDTH) * (2.0 / _TAIL_WIDTH) - 1.0
        u2 = 2.0 * u
        b1 = 0.0
        b2 = 0.0
        for j in range(_TAIL_DEG, 0, -1):
            b0 = u2 * b1 - b2 + c[j]
            b2 = b1
            b1 = b0
        return u * b1 - b2 + c[0]
    # asymptotic Mills-ratio series; truncation error < 1e-10 relative at t >= 12
    r = 1.0 / (t * t)
    s = 1.0 + r * (-1.0 + r * (3.0 + r * (-15.0 + r * (105.0 + r * (-945.0 + r * 10395.0)))))
    return s * _INV_SQRT_2PI / t


def gelu_forward(x):
    """Exact GELU; returns (y, dy/dx) so backward is a single multiply.

    Phi comes from the tabulated scaled erfc and shares one exp with the density.
    """
    src = np.ascontiguousarray(x, dtype=np.float64)
    gauss = np.exp(-0.5 * (src * src))
    y = np.empty_like(src)
    d = np.empty_like(src)
    cdef const double[::1] xv = src.reshape(-1)
    cdef const double[::1] ev = gauss.reshape(-1)
    cdef double[::1] yv = y.reshape(-1)
    cdef double[::1] dv = d.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, cdf, tail
    cdef const double* tab = &_tail[0, 0]
    with nogil:
        for i in range(n):
            v = xv[i]
            tail = _tail_ratio(fabs(v), tab) * ev[i]
            cdf = 1.0 - tail if v >= 0.0 else tail
            yv[i] = v * cdf
            dv[i] = cdf + v * _INV_SQRT_2PI * ev[i]
    return y, d


def gelu_forward_libm(x):
    """Reference GELU straight from libm erf/exp (slower; used for parity checks)."""
    src = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(src)
    d = np.empty_like(src)
    cdef const double[::1] xv = src.reshape(-1)
    cdef double[::1] yv = y.reshape(-1)
    cdef double[::1] dv = d.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, cdf
    with nogil:
        for i in range(n):
            v = xv[i]
            cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
            yv[i] = v * cdf
            dv[i] = cdf + v * _INV_SQRT_2PI * exp(-0.5 * v * v)
    return y, d


cdef inline unsigned long long _splitmix64(unsigned long long z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def dropout_scale(shape, double p, unsigned long long key):
    """Inverted-dropout multipliers (0 or 1/(1-p)) from a counter hash of ``key``.

    Entry i is kept iff the uniform built from splitmix64(key + (i+1) * golden)
    is >= p.
    """
    out = np.empty(shape, dtype=np.float64)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = ov.shape[0]
    cdef double keep = 1.0 / (1.0 - p)
    cdef double u
    cdef unsigned long long z
    with nogil:
        for i in range(n):
            z = _splitmix64(key + <unsigned long long>(i + 1) * 0x9E3779B97F4A7C15ULL)
            u = <double>(z >> 11) * 1.1102230246251565e-16
            ov[i] = keep if u >= p else 0.0
    return out


def layernorm_forward(const double[:, ::1] x, const double[::1] gamma,
                      const double[::1] beta, double eps):
    """Row-wise LayerNorm with population variance. Returns (y, xhat, rstd)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    y = np.empty((n, c), dtype=np.float64)
    xhat = np.empty((n, c), dtype=np.float64)
    rstd = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] hv = xhat
    cdef double[::1] rv = rstd
    cdef double mean, var, diff, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(c):
                mean = mean + x[i, j]
            mean = mean / c
            var = 0.0
            for j in range(c):
                diff = x[i, j] - mean
                var = var + diff * diff
            var = var / c
            r = 1.0 / sqrt(var + eps)
            rv[i] = r
            for j in range(c):
                diff = (x[i, j] - mean) * r
                hv[i, j] = diff
                yv[i, j] = diff * gamma[j] + beta[j]
    return y, xhat, rstd


def layernorm_backward(const double[:, ::1] grad_y, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gamma):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    cdef Py_ssize_t n = grad_y.shape[0], c = grad_y.shape[1], i, j
    gx = np.empty((n, c), dtype=np.float64)
    gg = np.zeros(c, dtype=np.float64)
    gb = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] gxv = gx
    cdef double[::1] ggv = gg
    cdef double[::1] gbv = gb
    cdef double s1, s2, gh, r
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(c):
                gh = grad_y[i, j] * gamma[j]
                s1 = s1 + gh
                s2 = s2 + gh * xhat[i, j]
                ggv[j] = ggv[j] + grad_y[i, j] * xhat[i, j]
                gbv[j] = gbv[j] + grad_y[i, j]
            s1 = s1 / c
            s2 = s2 / c
            r = rstd[i]
            for j in range(c):
                gh = grad_y[i, j] * gamma[j]
                gxv[i, j] = r * (gh - s1 - xhat[i, j] * s2)
    return gx, gg, gb


def zoh_hold(const double[:, ::1] clean, const unsigned char[::1] mask):
    """Zero-order hold of whole rows; mask[0] must be 1 (checked by caller)."""
    cdef Py_ssize_t t, j, n = clean.shape[0], c = clean.shape[1]
    out = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for t in range(n):
            if mask[t]:
                for j in range(c):
                    o[t, j] = clean[t, j]
            else:
                for j in range(c):
                    o[t, j] = o[t - 1, j]
    return out


def zero_runs(const unsigned char[::1] mask):
    """Lengths of maximal runs of zeros, in order of appearance."""
    cdef Py_ssize_t t, n = mask.shape[0], run = 0, k = 0
    runs = np.empty(n, dtype=np.int64)
    cdef long long[::1] rv = runs
    with nogil:
        for t in range(n):
            if mask[t] == 0:
                run += 1
            elif run > 0:
                rv[k] = run
                k += 1
                run = 0
        if run > 0:
            rv[k] = run
            k += 1
    return runs[:k].copy()
