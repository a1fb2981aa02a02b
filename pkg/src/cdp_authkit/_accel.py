"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``CDP_AUTHKIT_NUMBA`` environment variable is not set to ``0``/``false``.
Otherwise every kernel falls back to its pure-numpy twin. Both paths are
required to produce bit-identical results.
"""
import os

_FALSY = {"0", "false", "no", "off"}

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("CDP_AUTHKIT_NUMBA", "1").strip().lower() not in _FALSY


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator when numba is off."""
    kwargs.setdefault("cache", True)
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _njit(*args, **kwargs)


def worker_threads() -> int:
    """Worker cap from ``CDP_AUTHKIT_THREADS`` (default 1)."""
    raw = os.environ.get("CDP_AUTHKIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
