"""Backend selection for the compiled kernels.

Set ``MFBELLMAN_DISABLE_NUMBA=1`` to force the pure-numpy code paths even
when numba is importable.
"""

import os
import warnings

_FLAG = "MFBELLMAN_DISABLE_NUMBA"

# numba probes the system TBB on first parallel launch and warns when it is old
warnings.filterwarnings("ignore", message="The TBB threading layer")

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    NUMBA_AVAILABLE = False


def numba_enabled():
    if not NUMBA_AVAILABLE:
        return False
    return os.environ.get(_FLAG, "0").strip().lower() not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if NUMBA_AVAILABLE:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def set_threads(n):
    if NUMBA_AVAILABLE and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
