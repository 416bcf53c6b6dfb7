"""Numba switch for the hot kernels.

Set ``BACKDOOR_RL_NUMBA=0`` before import to run every kernel as plain
numpy/Python. The kernels are written so the same source runs either way.
"""

import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_flag = os.environ.get("BACKDOOR_RL_NUMBA", "1").strip().lower()
USE_NUMBA = NUMBA_AVAILABLE and _flag not in ("0", "false", "no", "off")


def kernel(func=None, *, fallback=None, fastmath=False):
    """Compile ``func`` with ``numba.njit`` when acceleration is on.

    ``fallback`` replaces ``func`` on the numpy path; use it when the
    compiled body is an explicit loop that would crawl in the interpreter.
    """
    def wrap(f):
        if USE_NUMBA:
            return numba.njit(cache=True, fastmath=fastmath)(f)
        return fallback if fallback is not None else f

    return wrap(func) if func is not None else wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
