"""Dense float64 layer kernels with hand-written backward passes.

Matrices are plain 2-D ``numpy.float64`` arrays. Every ``*_forward`` returns
``(output, cache)`` and the matching ``*_backward`` consumes that cache. A
cache captures references to the forward inputs, so mutating a parameter
array between forward and backward gives undefined gradients.

``matmul`` is the fixed-order reference product (bit-identical to a naive
triple loop). The layer kernels use BLAS through ``numpy.dot`` for speed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._backend import kernels

LAYERNORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _require_2d(x, name="input"):
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer RNG keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and optional sub-keys.

    Distinct key tuples give independent streams, so callers can split one
    master seed into per-purpose generators without sharing state.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


@dataclass
class LinearCache:
    x: np.ndarray
    w: np.ndarray


def linear_forward(x, w, b):
    """y = x @ w + b, with b broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return np.dot(x, w) + b, LinearCache(x, w)


def linear_backward(grad_y, cache: LinearCache):
    """Returns (grad_x, grad_w, grad_b)."""
    x, w = cache.x, cache.w
    if grad_y.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"linear backward: grad {grad_y.shape} vs output {(x.shape[0], w.shape[1])}"
        )
    return np.dot(grad_y, w.T), np.dot(x.T, grad_y), grad_y.sum(axis=0)


# ---------------------------------------------------------------------------
# LayerNorm
# ---------------------------------------------------------------------------


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    rstd: np.ndarray
    gamma: np.ndarray


def layernorm_forward(x, gamma, beta, eps=LAYERNORM_EPS):
    """Normalize each row over its columns (population variance), then scale and shift."""
    _require_2d(x)
    if x.shape[1] == 0:
        raise DimensionError("layernorm: zero-width input")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layernorm: gamma {gamma.shape} / beta {beta.shape} vs width {x.shape[1]}"
        )
    if not eps >= 0:  # 0 is allowed for exact checks; a constant row then divides by zero
        raise ValueError("layernorm: eps must be non-negative")
    y, xhat, rstd = kernels.layernorm_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(gamma, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        float(eps),
    )
    return y, LayerNormCache(xhat, rstd, gamma)


def layernorm_backward(grad_y, cache: LayerNormCache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    if grad_y.shape != cache.xhat.shape:
        raise DimensionError(
            f"layernorm backward: grad {grad_y.shape} vs output {cache.xhat.shape}"
        )
    return kernels.layernorm_backward(
        np.ascontiguousarray(grad_y, dtype=np.float64),
        cache.xhat,
        cache.rstd,
        np.ascontiguousarray(cache.gamma, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# GELU
# ---------------------------------------------------------------------------


@dataclass
class GeluCache:
    slope: np.ndarray


def gelu_forward(x):
    """Exact GELU, x * Phi(x) with Phi from erf. Works on any shape."""
    y, slope = kernels.gelu_forward(x)
    return y, GeluCache(slope)


def gelu_backward(grad_y, cache: GeluCache):
    if grad_y.shape != cache.slope.shape:
        raise DimensionError(f"gelu backward: grad {grad_y.shape} vs {cache.slope.shape}")
    return grad_y * cache.slope


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------


@dataclass
class DropoutCache:
    scale: np.ndarray | None  # None means identity


def dropout_forward(x, p, rng=None, training=True):
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, DropoutCache(None)
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    # one draw from the caller's generator keys a counter-hash mask
    key = int(rng.integers(0, 2**63))
    scale = kernels.dropout_scale(x.shape, float(p), key)
    return x * scale, DropoutCache(scale)


def dropout_backward(grad_y, cache: DropoutCache):
    if cache.scale is None:
        return grad_y
    return grad_y * cache.scale


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Advances ``state`` in place and returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"adam: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(f: Callable[[np.ndarray], float], params, h=1e-5):
    """Central differences of a scalar function, one coordinate at a time."""
    theta = np.array(params, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(f, params, analytic_grad, h=1e-5, floor=1e-8):
    """Max over coordinates of |a - n| / max(|a|, |n|, floor) against central differences."""
    if np.shape(analytic_grad) != np.shape(params):
        raise DimensionError(
            f"gradient shape {np.shape(analytic_grad)} vs params {np.shape(params)}"
        )
    if not np.isfinite(f(np.array(params, dtype=np.float64))):
        raise FloatingPointError("objective is not finite at the check point")
    numeric = numerical_gradient(f, params, h)
    if numeric.size == 0:
        return 0.0
    return float(relative_error(analytic_grad, numeric, floor).max())
