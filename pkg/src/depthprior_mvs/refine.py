"""Per-pixel Gauss-Newton depth refinement against a feature-metric error.

For a reference pixel ``p`` with depth ``d`` the residual stacks, over the
source views whose reprojection ``p_i(d)`` is in bounds and over the feature
channels, ``w_c * (F_i,c(p_i(d)) - F_0,c(p))``. Depth is one scalar per pixel,
so the normal equation is scalar too. The increment is solved in units of the
camera's depth interval, damped, clamped and only accepted if it lowers the
squared error (with up to three halvings).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .errors import ConfigError, DimensionError
from .geometry import Camera, plane_sweep_terms
from .matcher import FeatureImage

DEFAULT_CHANNEL_WEIGHTS = (1.0, 0.5, 0.5)
MAX_HALVINGS = 3


@dataclass(frozen=True)
class GNParams:
    max_iters: int = 3
    damping: float = 1e-3
    step_clamp: float = 1.0
    min_valid_sources: int = 1

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.damping < 0:
            raise ConfigError("damping must be >= 0")
        if not self.step_clamp > 0:
            raise ConfigError("step_clamp must be positive")
        if self.min_valid_sources < 1:
            raise ConfigError("min_valid_sources must be >= 1")


class GNResult(NamedTuple):
    depth: np.ndarray
    initial_error: np.ndarray  # sum of squared residuals before refinement, NaN if not evaluated
    final_error: np.ndarray
    active_sources: np.ndarray


def scalar_gn_step(residual: np.ndarray, jacobian: np.ndarray, damping: float = 0.0) -> float:
    """Damped Gauss-Newton increment for a scalar parameter: -J^T r / (J^T J + mu)."""
    r = np.asarray(residual, dtype=np.float64).ravel()
    J = np.asarray(jacobian, dtype=np.float64).ravel()
    denom = J @ J + damping
    if denom == 0:
        return 0.0
    return float(-(J @ r) / denom)


@numba.njit(cache=True)
def _sample(img, u, v):
    Hs, Ws = img.shape
    iu = min(int(u), Ws - 1)
    iv = min(int(v), Hs - 1)
    fu = u - iu
    fv = v - iv
    iu1 = min(iu + 1, Ws - 1)
    iv1 = min(iv + 1, Hs - 1)
    return (1.0 - fv) * ((1.0 - fu) * img[iv, iu] + fu * img[iv, iu1]) + fv * (
        (1.0 - fu) * img[iv1, iu] + fu * img[iv1, iu1]
    )


@numba.njit(cache=True)
def _evaluate(x, y, d, ref_vals, feats, grads, Ms, bs, weights, active, want_grad):
    """Return (ok, error, J^T r, J^T J) at depth d over the active sources."""
    S, C, Hs, Ws = feats.shape
    err = 0.0
    g = 0.0
    hess = 0.0
    for s in range(S):
        if not active[s]:
            continue
        M = Ms[s]
        b = bs[s]
        a0 = M[0, 0] * x + M[0, 1] * y + M[0, 2]
        a1 = M[1, 0] * x + M[1, 1] * y + M[1, 2]
        a2 = M[2, 0] * x + M[2, 1] * y + M[2, 2]
        h0 = a0 * d + b[0]
        h1 = a1 * d + b[1]
        h2 = a2 * d + b[2]
        if h2 <= 0.0:
            return False, 0.0, 0.0, 0.0
        u = h0 / h2
        v = h1 / h2
        if u < 0.0 or u > Ws - 1 or v < 0.0 or v > Hs - 1:
            return False, 0.0, 0.0, 0.0
        du = (a0 * h2 - h0 * a2) / (h2 * h2)
        dv = (a1 * h2 - h1 * a2) / (h2 * h2)
        for c in range(C):
            r = weights[c] * (_sample(feats[s, c], u, v) - ref_vals[c])
            err += r * r
            if want_grad:
                j = weights[c] * (_sample(grads[s, c, 0], u, v) * du + _sample(grads[s, c, 1], u, v) * dv)
                g += j * r
                hess += j * j
    return True, err, g, hess


@numba.njit(parallel=True, cache=True)
def _gn_kernel(depth, ref_feat, feats, grads, Ms, bs, weights, max_iters, damping, step_max, unit,
               min_sources, out_depth, err0, err1, n_active):
    H, W = depth.shape
    S, C, Hs, Ws = feats.shape
    for y in numba.prange(H):
        active = np.zeros(S, dtype=np.bool_)
        single = np.zeros(S, dtype=np.bool_)
        ref_vals = np.empty(C)
        for x in range(W):
            d = depth[y, x]
            out_depth[y, x] = d
            err0[y, x] = np.nan
            err1[y, x] = np.nan
            n_active[y, x] = 0
            if d <= 0.0:
                continue
            for c in range(C):
                ref_vals[c] = ref_feat[c, y, x]
            # sources visible at the starting depth stay fixed for this pixel
            count = 0
            for s in range(S):
                single[:] = False
                single[s] = True
                ok, e, g, h = _evaluate(x, y, d, ref_vals, feats, grads, Ms, bs, weights, single, False)
                active[s] = ok
                if ok:
                    count += 1
            n_active[y, x] = count
            if count < min_sources:
                continue
            ok, e, g, h = _evaluate(x, y, d, ref_vals, feats, grads, Ms, bs, weights, active, True)
            err0[y, x] = e
            for it in range(max_iters):
                # increment in depth-interval units: t = d / unit
                step = -(g * unit) / (h * unit * unit + damping) * unit
                if step > step_max:
                    step = step_max
                elif step < -step_max:
                    step = -step_max
                accepted = False
                for k in range(4):
                    dn = d + step
                    if dn > 0.0:
                        ok2, en, g2, h2 = _evaluate(x, y, dn, ref_vals, feats, grads, Ms, bs, weights, active, True)
                        if ok2 and en < e:
                            accepted = True
                            break
                    step *= 0.5
                if not accepted:
                    break
                d = dn
                e = en
                g = g2
                h = h2
            out_depth[y, x] = d
            err1[y, x] = e


def _stack_sources(src_feats: list[FeatureImage]):
    shapes = {f.data.shape for f in src_feats}
    if len(shapes) != 1:
        raise DimensionError(f"source features must share one shape, got {shapes}")
    feats = np.stack([f.data for f in src_feats]).astype(np.float64)
    grads = np.empty(feats.shape[:2] + (2,) + feats.shape[2:])
    for s in range(feats.shape[0]):
        for c in range(feats.shape[1]):
            gy, gx = np.gradient(feats[s, c])
            grads[s, c, 0] = gx
            grads[s, c, 1] = gy
    return feats, grads


def gauss_newton(
    depth: np.ndarray,
    ref_feat: FeatureImage,
    src_feats: list[FeatureImage],
    cameras: tuple[Camera, list[Camera]],
    params: GNParams = GNParams(),
    channel_weights=DEFAULT_CHANNEL_WEIGHTS,
) -> GNResult:
    """Refine ``depth`` and report the per-pixel squared error before and after."""
    ref_cam, src_cams = cameras
    if len(src_cams) != len(src_feats) or not src_feats:
        raise ConfigError("need one camera per source feature image, and at least one source")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (ref_feat.height, ref_feat.width) or depth.shape != (ref_cam.height, ref_cam.width):
        raise DimensionError("depth, reference features and reference camera must agree in size")
    weights = np.asarray(channel_weights, dtype=np.float64)[: ref_feat.channels]
    if len(weights) != ref_feat.channels:
        raise ConfigError("need one channel weight per feature channel")
    feats, grads = _stack_sources(src_feats)
    terms = [plane_sweep_terms(ref_cam, c) for c in src_cams]
    Ms = np.stack([m for m, _ in terms])
    bs = np.stack([b for _, b in terms])

    unit = ref_cam.depth_interval
    out = np.empty_like(depth)
    err0 = np.empty_like(depth)
    err1 = np.empty_like(depth)
    n_active = np.empty(depth.shape, dtype=np.int64)
    _gn_kernel(
        depth, ref_feat.data.astype(np.float64), feats, grads, Ms, bs, weights,
        params.max_iters, params.damping, params.step_clamp * unit, unit, params.min_valid_sources,
        out, err0, err1, n_active,
    )
    return GNResult(out.astype(np.float32), err0, err1, n_active)


def gn_refine(
    depth: np.ndarray,
    ref_feat: FeatureImage,
    src_feats: list[FeatureImage],
    cameras: tuple[Camera, list[Camera]],
    params: GNParams = GNParams(),
) -> np.ndarray:
    """Refined depth map; missing pixels and pixels with no visible source are left as they are."""
    return gauss_newton(depth, ref_feat, src_feats, cameras, params).depth
