"""Plane-sweep multi-view stereo with optional low-quality depth priors."""

import numba

# the TBB layer shipped in some environments is too old; OpenMP is deterministic enough for
# our disjoint-output kernels and falls back to the workqueue layer if unavailable
try:
    numba.config.THREADING_LAYER = "omp"
except Exception:  # pragma: no cover
    pass

__version__ = "0.1.0"
