"""Numba switch.

Set ``M2AE_NUMBA=0`` in the environment to force the pure-numpy kernels.
The flag is read once at import time.
"""
import ctypes
import ctypes.util
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("M2AE_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if numba is None:
        return func
    return numba.njit(cache=True, fastmath=False)(func)


def keep_heap_mapped():
    """Stop glibc from mmap/munmap-ing every activation-sized temporary.

    Graph evaluation allocates and frees many 0.1-1 MB arrays; with the default
    thresholds each one costs fresh page faults, which roughly doubled wall time.
    No-op off glibc.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    # 32 MiB is glibc's ceiling for the mmap threshold on 64-bit
    return bool(mallopt(m_trim_threshold, 1 << 30)) and bool(mallopt(m_mmap_threshold, 32 << 20))
