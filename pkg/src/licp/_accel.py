"""Numba availability and the switch between JIT and pure-numpy kernels.

Set ``LICP_DISABLE_NUMBA=1`` to force the numpy path (useful for debugging
and for checking that both paths agree).
"""
import os

_DISABLED = os.environ.get("LICP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba
    from numba import njit, prange

    # the bundled TBB is often too old and warns; prefer OpenMP, then workqueue
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn

    prange = range


USE_NUMBA = HAVE_NUMBA and not _DISABLED
