"""Forecasting multivariate series whose inputs arrive stale (zero-order-hold delays)."""

__version__ = "0.1.0"

from ._backend import kernels  # noqa: E402  (selects compiled or numpy kernels)

__all__ = ["__version__", "kernels"]
