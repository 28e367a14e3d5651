"""Kernel backend selection.

Hot numerical kernels in mfglab are written once, in a numba-compatible
subset of numpy, and compiled with @njit unless the pure-numpy fallback is
requested.  Selection, checked once at import time:

    MFGLAB_BACKEND=numpy   force the pure-Python/numpy path
    MFGLAB_BACKEND=numba   require numba (ImportError if missing)

unset: use numba when importable, else fall back silently to numpy.
"""

import os

_requested = os.environ.get("MFGLAB_BACKEND", "").strip().lower()

if _requested not in ("", "numpy", "numba"):
    raise ValueError(
        "MFGLAB_BACKEND must be 'numpy' or 'numba', got %r" % _requested
    )

if _requested == "numpy":
    HAS_NUMBA = False
else:
    try:
        import numba  # noqa: F401

        HAS_NUMBA = True
    except ImportError:
        if _requested == "numba":
            raise
        HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def jit_kernel(func):
    """Compile ``func`` with numba when enabled, else return it unchanged.

    Kernels must stay inside the numba-supported numpy subset so the same
    source runs on both backends.
    """
    if HAS_NUMBA:
        from numba import njit

        return njit(cache=True, fastmath=False)(func)
    return func
