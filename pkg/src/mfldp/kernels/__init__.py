"""Hot numeric kernels with a numba path and a pure-numpy path.

The loop kernels in ``_loops`` are compiled with numba; ``_vector`` holds the
vectorized numpy equivalents.  Which set is exported is decided once by
``MFLDP_BACKEND`` (see ``mfldp._backend``).
"""

from .._backend import BACKEND, USE_NUMBA
from ._loops import STATUS_INFEASIBLE, STATUS_NOT_CONVERGED, STATUS_OK

if USE_NUMBA:
    from ._loops import (
        drift_batch,
        rates_batch,
        rk4_endpoints,
        rk4_path,
        slice_solve_batch,
        ssa_occupation,
        ssa_run,
    )
else:
    from ._vector import (
        drift_batch,
        rates_batch,
        rk4_endpoints,
        rk4_path,
        slice_solve_batch,
        ssa_occupation,
        ssa_run,
    )

__all__ = [
    "BACKEND",
    "STATUS_INFEASIBLE",
    "STATUS_NOT_CONVERGED",
    "STATUS_OK",
    "drift_batch",
    "rates_batch",
    "rk4_endpoints",
    "rk4_path",
    "slice_solve_batch",
    "ssa_occupation",
    "ssa_run",
]
