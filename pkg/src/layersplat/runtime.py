"""Thread-pool configuration for the numba kernels."""

from __future__ import annotations

import os

import numba

THREADS_ENV = "LAYERSPLAT_THREADS"


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def set_threads(n: int | None = None) -> int:
    """Set the kernel worker count.

    ``None`` falls back to ``$LAYERSPLAT_THREADS``, then to the CPU count.
    Values above the pool size fixed at import time are capped.
    """
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    n = min(n, max_threads())
    numba.set_num_threads(n)
    return n


def get_threads() -> int:
    return numba.get_num_threads()
