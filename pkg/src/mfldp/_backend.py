"""Backend selection for the numeric kernels.

``MFLDP_BACKEND=numpy`` forces the pure-numpy path; anything else uses numba
when it is importable.  The choice is fixed at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

REQUESTED = os.environ.get("MFLDP_BACKEND", "numba").strip().lower()
USE_NUMBA = numba is not None and REQUESTED != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


def jit(fn):
    """``numba.njit`` when enabled, identity otherwise."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn
