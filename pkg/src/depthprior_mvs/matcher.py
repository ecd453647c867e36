"""Plane-sweep cost volumes with hand-crafted matching costs.

For every reference pixel and depth hypothesis the reference patch is warped
into each source view through the fronto-parallel plane at that depth, sampled
bilinearly and compared with ``1 - ZNCC``. Per-source costs are averaged over
the sources whose warped patch lands fully inside the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .dataio import View, to_gray
from .errors import ConfigError, DimensionError
from .geometry import plane_sweep_terms

# patches whose intensity variance sum falls below this are treated as textureless
VARIANCE_EPS = 1e-10
NEUTRAL_COST = 1.0
INVALID_COST = 2.0


@dataclass(eq=False)
class FeatureImage:
    data: np.ndarray  # (C, H, W) float32
    names: tuple[str, ...] = ("intensity", "grad_x", "grad_y")

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise DimensionError(f"feature data must be (C, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def extract_features(image: np.ndarray, gradients: bool = True) -> FeatureImage:
    """Grayscale intensity in [0, 1] plus x/y derivatives.

    ``image`` is RGB on the 0..255 scale (any dtype) or a 2-D intensity image
    already in [0, 1]. Derivatives are central differences, one-sided at the
    border.
    """
    image = np.asarray(image)
    gray = to_gray(image) if image.ndim == 3 else image.astype(np.float32)
    if not gradients:
        return FeatureImage(gray[None].astype(np.float32), ("intensity",))
    gy, gx = np.gradient(gray.astype(np.float64))
    return FeatureImage(np.stack([gray, gx, gy]).astype(np.float32))


@dataclass(eq=False)
class HypothesisSet:
    """Depth hypotheses: either ``(D,)`` shared by all pixels or ``(H, W, D)``.

    Per-pixel rows that are all zero mark pixels without hypotheses.
    """

    depths: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim not in (1, 3):
            raise DimensionError("hypotheses must be (D,) or (H, W, D)")
        if self.count < 2:
            raise ConfigError("need at least 2 depth hypotheses")
        if self.is_global:
            if np.any(self.depths <= 0) or np.any(np.diff(self.depths) <= 0):
                raise ConfigError("global hypotheses must be positive and strictly increasing")
        else:
            defined = np.any(self.depths != 0, axis=-1)
            rows = self.depths[defined]
            if np.any(np.diff(rows, axis=-1) <= 0):
                raise ConfigError("per-pixel hypotheses must be strictly increasing along D")

    @classmethod
    def uniform(cls, start: float, interval: float, count: int) -> HypothesisSet:
        return cls(start + interval * np.arange(count))

    @property
    def is_global(self) -> bool:
        return self.depths.ndim == 1

    @property
    def count(self) -> int:
        return self.depths.shape[-1]

    def at(self, shape) -> np.ndarray:
        """Hypotheses broadcast to ``(H, W, D)``."""
        if self.is_global:
            return np.broadcast_to(self.depths, tuple(shape) + (self.count,))
        return self.depths

    def span(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.depths
        return d[..., 0], d[..., -1]


@dataclass(eq=False)
class CostVolume:
    cost: np.ndarray  # (H, W, D) float32, lower is better
    valid: np.ndarray  # (H, W, D) bool
    stride: int = 1

    @property
    def shape(self):
        return self.cost.shape


@numba.njit(parallel=True, cache=True)
def _zncc_single_source(ref, src, M, b, hyps, is_global, stride, radius, out_cost, out_ok):
    Ho, Wo, D = out_cost.shape
    H, W = ref.shape
    Hs, Ws = src.shape
    P = (2 * radius + 1) * (2 * radius + 1)
    for oy in numba.prange(Ho):
        ref_buf = np.empty(P)
        src_buf = np.empty(P)
        y = oy * stride
        y0 = max(y - radius, 0)
        y1 = min(y + radius, H - 1)
        for ox in range(Wo):
            x = ox * stride
            x0 = max(x - radius, 0)
            x1 = min(x + radius, W - 1)
            n = 0
            mean_r = 0.0
            for yy in range(y0, y1 + 1):
                for xx in range(x0, x1 + 1):
                    ref_buf[n] = ref[yy, xx]
                    mean_r += ref[yy, xx]
                    n += 1
            mean_r /= n
            var_r = 0.0
            for k in range(n):
                ref_buf[k] -= mean_r
                var_r += ref_buf[k] * ref_buf[k]
            for i in range(D):
                if is_global:
                    d = hyps[0, 0, i]
                else:
                    d = hyps[oy, ox, i]
                out_ok[oy, ox, i] = False
                out_cost[oy, ox, i] = 2.0
                if d <= 0.0:
                    continue
                inside = True
                k = 0
                mean_s = 0.0
                for yy in range(y0, y1 + 1):
                    if not inside:
                        break
                    for xx in range(x0, x1 + 1):
                        h0 = (M[0, 0] * xx + M[0, 1] * yy + M[0, 2]) * d + b[0]
                        h1 = (M[1, 0] * xx + M[1, 1] * yy + M[1, 2]) * d + b[1]
                        h2 = (M[2, 0] * xx + M[2, 1] * yy + M[2, 2]) * d + b[2]
                        if h2 <= 0.0:
                            inside = False
                            break
                        u = h0 / h2
                        v = h1 / h2
                        if u < 0.0 or u > Ws - 1 or v < 0.0 or v > Hs - 1:
                            inside = False
                            break
                        iu = min(int(u), Ws - 1)
                        iv = min(int(v), Hs - 1)
                        fu = u - iu
                        fv = v - iv
                        iu1 = min(iu + 1, Ws - 1)
                        iv1 = min(iv + 1, Hs - 1)
                        val = (
                            (1.0 - fv) * ((1.0 - fu) * src[iv, iu] + fu * src[iv, iu1])
                            + fv * ((1.0 - fu) * src[iv1, iu] + fu * src[iv1, iu1])
                        )
                        src_buf[k] = val
                        mean_s += val
                        k += 1
                if not inside:
                    continue
                mean_s /= n
                var_s = 0.0
                cov = 0.0
                for j in range(n):
                    ds = src_buf[j] - mean_s
                    var_s += ds * ds
                    cov += ds * ref_buf[j]
                out_ok[oy, ox, i] = True
                if var_r <= 1e-10 or var_s <= 1e-10:
                    out_cost[oy, ox, i] = 1.0
                else:
                    zncc = cov / np.sqrt(var_r * var_s)
                    out_cost[oy, ox, i] = 1.0 - min(1.0, max(-1.0, zncc))


def output_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    return (height + stride - 1) // stride, (width + stride - 1) // stride


def build_cost_volume(
    ref: View, sources: list[View], hyps: HypothesisSet, patch: int = 7, stride: int = 1
) -> CostVolume:
    """Plane-sweep ZNCC cost volume for the reference pixels ``(stride*y, stride*x)``."""
    if not sources:
        raise ConfigError("build_cost_volume needs at least one source view")
    if patch < 3 or patch % 2 == 0:
        raise ConfigError(f"patch must be an odd integer >= 3, got {patch}")
    H, W = ref.camera.height, ref.camera.width
    Ho, Wo = output_shape(H, W, stride)
    D = hyps.count
    if not hyps.is_global and hyps.depths.shape[:2] != (Ho, Wo):
        raise DimensionError(f"per-pixel hypotheses {hyps.depths.shape[:2]} do not match output {(Ho, Wo)}")
    hyp_arr = hyps.depths.reshape(1, 1, D) if hyps.is_global else np.ascontiguousarray(hyps.depths)

    ref_gray = ref.gray.astype(np.float64)
    per_source = np.empty((len(sources), Ho, Wo, D), dtype=np.float64)
    for s, src in enumerate(sources):
        M, b = plane_sweep_terms(ref.camera, src.camera)
        cost = np.empty((Ho, Wo, D), dtype=np.float64)
        ok = np.empty((Ho, Wo, D), dtype=np.bool_)
        _zncc_single_source(
            ref_gray, src.gray.astype(np.float64), M, b, hyp_arr, hyps.is_global, stride, patch // 2, cost, ok
        )
        per_source[s] = np.where(ok, cost, np.inf)
    return aggregate_costs(per_source, stride)


def aggregate_costs(per_source: np.ndarray, stride: int = 1) -> CostVolume:
    """Mean over finite per-source costs, independent of source order.

    Costs are sorted along the source axis before summation, so the float
    result is bit-identical under any permutation of the sources.
    """
    ordered = np.sort(per_source, axis=0)
    finite = np.isfinite(ordered)
    count = finite.sum(axis=0)
    total = np.zeros(ordered.shape[1:])
    for s in range(ordered.shape[0]):
        total += np.where(finite[s], ordered[s], 0.0)
    valid = count > 0
    mean = np.full(total.shape, INVALID_COST)
    np.divide(total, count, out=mean, where=valid)
    return CostVolume(mean.astype(np.float32), valid, stride)


def softmax_probabilities(vol: CostVolume, temperature: float) -> np.ndarray:
    logits = np.where(vol.valid, -vol.cost.astype(np.float64) / temperature, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    expd = np.exp(logits - top)
    norm = expd.sum(axis=-1, keepdims=True)
    return np.divide(expd, norm, out=np.zeros_like(expd), where=norm > 0)


def regress_depth(
    vol: CostVolume, hyps: HypothesisSet, mode: str = "soft", temperature: float = 0.02
) -> tuple[np.ndarray, np.ndarray]:
    """Turn a cost volume into ``(depth, confidence)``.

    ``wta`` picks the lowest-cost hypothesis (ties go to the smaller depth);
    ``soft`` takes the expectation under ``softmax(-cost / temperature)``.
    Confidence is the softmax mass of the winning hypothesis in ``wta`` mode and
    of the winner plus its two neighbours in ``soft`` mode. Pixels without any
    valid hypothesis come out missing (depth 0, confidence 0).
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if mode not in ("wta", "soft"):
        raise ConfigError(f"unknown regression mode {mode!r}")
    H, W, D = vol.shape
    if D != hyps.count or (not hyps.is_global and hyps.depths.shape[:2] != (H, W)):
        raise DimensionError("cost volume and hypotheses disagree in shape")
    depths = hyps.at((H, W))
    prob = softmax_probabilities(vol, temperature)
    any_valid = vol.valid.any(axis=-1)
    best = np.argmin(np.where(vol.valid, vol.cost, np.inf), axis=-1)

    if mode == "wta":
        depth = np.take_along_axis(depths, best[..., None], axis=-1)[..., 0]
        conf = np.take_along_axis(prob, best[..., None], axis=-1)[..., 0]
    else:
        depth = (prob * depths).sum(axis=-1)
        padded = np.pad(prob, ((0, 0), (0, 0), (1, 1)))
        conf = sum(np.take_along_axis(padded, best[..., None] + k, axis=-1)[..., 0] for k in range(3))

    depth = np.where(any_valid, depth, 0.0).astype(np.float32)
    conf = np.clip(np.where(any_valid, conf, 0.0), 0.0, 1.0).astype(np.float32)
    return depth, conf
