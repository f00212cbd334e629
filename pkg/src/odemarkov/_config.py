"""Runtime switches.

Set ``ODEMARKOV_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  The flag
is read once at import time.
"""
import os

_FLAG = "ODEMARKOV_DISABLE_NUMBA"


def _numba_requested():
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()

numba_options = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}
