"""Switch between numba-compiled kernels and their pure-numpy fallbacks.

Set ``CTXBIAS_DISABLE_NUMBA=1`` before import to force the numpy path.
"""

import os

DISABLE_ENV = "CTXBIAS_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "0").lower() not in ("1", "true", "yes")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def pick(compiled, fallback):
    return compiled if USE_NUMBA else fallback
