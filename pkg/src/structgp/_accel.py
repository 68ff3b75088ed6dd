"""Numba dispatch for the hot ψ-statistic kernels.

Set ``STRUCTGP_DISABLE_NUMBA=1`` to force the pure-numpy path.  The flag is
read once at import; tests flip it through :func:`use_numba`.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
_enabled = HAVE_NUMBA and os.environ.get("STRUCTGP_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def numba_enabled():
    return _enabled


def use_numba(flag):
    """Toggle the numba path at runtime; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and HAVE_NUMBA
    return prev


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
