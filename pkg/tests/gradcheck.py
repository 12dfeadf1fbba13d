"""Finite-difference check of the full network's MSE gradient."""

import numpy as np

from relamix import model as M
from relamix import numerics as N
from relamix.trainer import mse_loss


def random_small_config(r: np.random.Generator, ablation: str) -> M.ModelConfig:
    d_model = int(r.integers(2, 17))
    return M.ModelConfig(
        window=int(r.integers(1, 9)),
        horizon=int(r.integers(1, 4)),
        d_in=int(r.integers(1, 6)),
        d_out=int(r.integers(1, 6)),
        d_bottleneck=int(r.integers(1, d_model + 1)),
        d_model=d_model,
        n_blocks=int(r.integers(1, 4)),
        skip_scale=float(r.uniform(0.0, 1.0)),
        dropout=float(r.uniform(0.0, 0.5)),  # ignored: checks run in eval mode
        ablation=ablation,
    )


def model_gradient_error(cfg: M.ModelConfig, seed: int, batch: int = 4, h: float = 1e-5, floor=1e-8):
    """Max relative gradient error. ``floor="resolvable"`` sets the denominator floor
    to the smallest gradient a central difference can resolve to 1e-4 given the
    loss's rounding noise, eps * |loss| / h."""
    r = np.random.default_rng(seed)
    params = M.init_parameters(cfg, seed)
    # move betas and biases off zero so every branch carries signal
    params.flat += r.normal(scale=0.1, size=params.size)
    x = r.normal(size=(batch, cfg.window, cfg.d_in))
    y = r.normal(size=(batch, cfg.horizon, cfg.d_out))

    def loss(theta):
        pred, _ = M.forward(cfg, M.ParameterSet(params.layout, theta), x)
        return mse_loss(pred, y)[0]

    pred, trace = M.forward(cfg, params, x)
    value, g = mse_loss(pred, y)
    grads = M.backward(cfg, params, trace, g)
    if floor == "resolvable":
        floor = np.finfo(np.float64).eps * max(value, 1.0) / h / 1e-4
    return N.gradient_check(loss, params.flat.copy(), grads.flat, h, floor)
