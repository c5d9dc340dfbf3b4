"""Optional numba acceleration.

Set ``BQSCHED_DISABLE_NUMBA=1`` to force the pure-numpy code paths, e.g. for
debugging or on platforms without numba.
"""
import importlib.util
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def _have_numba():
    if os.environ.get("BQSCHED_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return False
    return importlib.util.find_spec("numba") is not None


USE_NUMBA = _have_numba()

if USE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
