"""Optional numba acceleration.

Set ``AAALAB_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""

import os

_DISABLED = os.environ.get("AAALAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # numba missing or disabled
    _njit = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAS_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def use_numba() -> bool:
    return HAS_NUMBA
