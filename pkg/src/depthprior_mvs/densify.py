"""Guided sparse-to-dense depth propagation.

Each output pixel is a normalised weighted sum of the valid depths in its
``k x k`` window::

    d(p) = 1/z_p * sum_q d(q) * w(p, q),   z_p = sum_q w(p, q)

with joint-bilateral weights computed from the reference intensity image:
``w = exp(-(I(p) - I(q))^2 / (2 sc^2)) * exp(-|p - q|^2 / (2 ss^2))`` for valid
``q`` and 0 otherwise. Valid pixels are re-smoothed as well (``p`` is in its own
window).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import check_depth, to_gray
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class PropagationParams:
    window: int = 3
    sigma_color: float = 0.1
    sigma_spatial: float = 1.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 3, got {self.window}")
        if not (self.sigma_color > 0 and self.sigma_spatial > 0):
            raise ConfigError("sigma_color and sigma_spatial must be positive")


def _guide_intensity(guide) -> np.ndarray:
    guide = np.asarray(guide)
    if guide.dtype == np.uint8:
        return to_gray(guide).astype(np.float64)
    return guide.astype(np.float64)


def propagate(sparse: np.ndarray, guide, params: PropagationParams = PropagationParams()) -> np.ndarray:
    depth = check_depth(sparse, "sparse depth").astype(np.float64)
    intensity = _guide_intensity(guide)
    if intensity.shape != depth.shape:
        raise DimensionError(f"guide {intensity.shape} and depth {depth.shape} differ in size")
    H, W = depth.shape
    r = params.window // 2
    pad_d = np.pad(depth, r)
    pad_i = np.pad(intensity, r)
    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    color_scale = 2.0 * params.sigma_color**2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d_q = pad_d[r + dy : r + dy + H, r + dx : r + dx + W]
            i_q = pad_i[r + dy : r + dy + H, r + dx : r + dx + W]
            spatial = np.exp(-(dx * dx + dy * dy) / (2.0 * params.sigma_spatial**2))
            w = spatial * np.exp(-((intensity - i_q) ** 2) / color_scale) * (d_q > 0)
            num += w * d_q
            den += w
    out = np.zeros_like(depth)
    np.divide(num, den, out=out, where=den > 0)
    return out.astype(np.float32)


def expand_sparse(sparse: np.ndarray, stride: int, shape: tuple[int, int]) -> np.ndarray:
    """Place a strided estimate at ``(stride*y, stride*x)`` of a full-size map; other pixels are holes."""
    H, W = shape
    out = np.zeros(shape, dtype=np.float32)
    sub = out[::stride, ::stride]
    if sub.shape != sparse.shape:
        raise DimensionError(f"sparse map {sparse.shape} does not fit {shape} at stride {stride}")
    out[::stride, ::stride] = sparse
    return out
