"""Numba switch.

Hot kernels are written twice: a loop version compiled with ``numba.njit`` and
a vectorised numpy version. Setting ``DYNACL_DISABLE_NUMBA=1`` (or running
without numba installed) selects the numpy path everywhere.
"""
import os

NUMBA_DISABLED = os.environ.get("DYNACL_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


def njit(fn):
    """Compile ``fn`` when numba is importable; otherwise return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
