"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
``RELAMIX_PURE=1`` forces the fallback (used by the benchmark and the
backend-parity tests).
"""

import os

from . import _fallback

if os.environ.get("RELAMIX_PURE"):
    kernels = _fallback
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = _fallback

fallback = _fallback


def compiled():
    """Return the compiled module, or None if it was not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
