"""Numba switch.

Hot kernels come in two flavours: explicit loops compiled with ``numba.njit``
and a vectorised numpy fallback. Set ``DESKDP_DISABLE_NUMBA=1`` to force the
numpy path (also used automatically when numba is not importable).
"""

import os

DISABLE_ENV = "DESKDP_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` if numba is importable, else return it untouched.

    Compilation is independent of ``USE_NUMBA`` so the benchmark can time both
    paths in one process; ``USE_NUMBA`` only decides which one is dispatched.
    """
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
