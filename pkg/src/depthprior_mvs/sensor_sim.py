"""Synthetic low-quality "sensor" depth from ground truth.

The ground-truth map is box-downsampled (mean of valid pixels per block) and
then perturbed in disparity space::

    d_corrupted = b*f / (b*f / d_down + n + 0.5),   n ~ N(0, sigma_d^2)

with a virtual stereo baseline ``b`` (mm) and focal length ``f`` (px).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataio import check_depth
from .errors import ConfigError, DimensionError

# f = 2892 px belongs to 1600x1200 DTU depth maps
REFERENCE_WIDTH = 1600
DENOM_EPS = 1e-9


@dataclass(frozen=True)
class CorruptionParams:
    baseline_mm: float = 100.0
    focal_px: float = 2892.0
    sigma_d: float = 1.0 / 6.0
    downsample: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.baseline_mm > 0:
            raise ConfigError("baseline_mm must be positive")
        if not self.focal_px > 0:
            raise ConfigError("focal_px must be positive")
        if not self.sigma_d >= 0:
            raise ConfigError("sigma_d must be non-negative")
        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise ConfigError("downsample must be a positive integer")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def for_width(self, width: int) -> CorruptionParams:
        """Scale the focal length from the 1600 px reference width to ``width``."""
        return replace(self, focal_px=self.focal_px * width / REFERENCE_WIDTH)


def box_downsample(depth: np.ndarray, factor: int) -> np.ndarray:
    """Average each ``factor x factor`` block over its valid (non-zero) pixels.

    Blocks without any valid pixel become missing (0).
    """
    depth = check_depth(depth)
    if factor < 1 or int(factor) != factor:
        raise ConfigError(f"downsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return depth.copy()
    h, w = depth.shape
    if h % factor or w % factor:
        raise DimensionError(f"{w}x{h} depth map is not divisible by factor {factor}")
    blocks = depth.astype(np.float64).reshape(h // factor, factor, w // factor, factor)
    total = blocks.sum(axis=(1, 3))
    count = (blocks > 0).sum(axis=(1, 3))
    out = np.zeros_like(total)
    np.divide(total, count, out=out, where=count > 0)
    return out.astype(np.float32)


def pixel_normals(seed: int, start: int, count: int) -> np.ndarray:
    """Standard normal draws for pixel indices ``start .. start+count-1``.

    Pixel ``i`` consumes the Philox4x64 outputs ``2i`` and ``2i+1`` of the
    stream keyed by ``seed``, turned into one normal by the cosine branch of
    Box-Muller. Any sub-range can therefore be generated independently.
    """
    if count == 0:
        return np.zeros(0)
    first_word = 2 * start
    bitgen = np.random.Philox(key=seed)
    # one counter step yields 4 words; start the stream at the enclosing block
    bitgen.advance(first_word // 4)
    skip = first_word % 4
    raw = bitgen.random_raw(skip + 2 * count)[skip:]
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53  # [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def corrupt_downsampled(
    d_down: np.ndarray, params: CorruptionParams, noise: np.ndarray | None = None
) -> np.ndarray:
    """Apply the disparity-noise formula to an already downsampled map.

    ``noise`` holds the disparity perturbation per pixel (in px); by default it
    is drawn from ``params``.
    """
    d_down = np.asarray(d_down, dtype=np.float64)
    if noise is None:
        noise = params.sigma_d * pixel_normals(params.seed, 0, d_down.size).reshape(d_down.shape)
    bf = params.baseline_mm * params.focal_px
    valid = d_down > 0
    denom = np.where(valid, bf / np.where(valid, d_down, 1.0) + noise + 0.5, 0.0)
    ok = valid & (denom > DENOM_EPS)
    out = np.zeros(d_down.shape, dtype=np.float64)
    out[ok] = bf / denom[ok]
    return out.astype(np.float32)


def corrupt(depth: np.ndarray, params: CorruptionParams = CorruptionParams(), threads: int = 1) -> np.ndarray:
    """Box-downsample ``depth`` and add disparity noise.

    ``params.focal_px`` is used as given; use :meth:`CorruptionParams.for_width`
    to rescale the DTU focal length to other resolutions. The result is
    bit-identical for any ``threads``.
    """
    d_down = box_downsample(depth, int(params.downsample))
    h, w = d_down.shape
    if threads <= 1 or h < 2:
        return corrupt_downsampled(d_down, params)

    bands = np.array_split(np.arange(h), min(threads, h))

    def work(rows):
        r0, r1 = int(rows[0]), int(rows[-1]) + 1
        noise = params.sigma_d * pixel_normals(params.seed, r0 * w, (r1 - r0) * w)
        return corrupt_downsampled(d_down[r0:r1], params, noise.reshape(r1 - r0, w))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, [b for b in bands if len(b)]))
    return np.concatenate(parts, axis=0)


def implied_disparity_error(d_corrupted: np.ndarray, d_down: np.ndarray, params: CorruptionParams) -> np.ndarray:
    """Recover ``n`` from a corrupted map: b*f/d_corrupted - b*f/d_down - 0.5."""
    bf = params.baseline_mm * params.focal_px
    valid = (d_corrupted > 0) & (d_down > 0)
    return bf / d_corrupted[valid].astype(np.float64) - bf / d_down[valid].astype(np.float64) - 0.5
