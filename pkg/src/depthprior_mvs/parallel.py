"""Thread-count control for the numba kernels.

Every kernel writes disjoint per-pixel outputs, so results do not depend on the
number of threads; this module only caps how many are used.
"""

import os

import numba

ENV_THREADS = "DEPTHPRIOR_MVS_THREADS"


def available_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def resolve_threads(requested: int | None = None) -> int:
    if requested is None:
        env = os.environ.get(ENV_THREADS)
        requested = int(env) if env else available_threads()
    return max(1, min(int(requested), available_threads()))


def set_threads(requested: int | None = None) -> int:
    n = resolve_threads(requested)
    numba.set_num_threads(n)
    return n
