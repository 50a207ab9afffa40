"""Optional numba acceleration.

Set ``POLABS_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The flag
is read once at import time; use a fresh interpreter to switch paths.
"""
import os

_FLAG = os.environ.get("POLABS_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba ships in the dev image
    numba = None

HAS_NUMBA = numba is not None and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, otherwise a no-op decorator."""
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
