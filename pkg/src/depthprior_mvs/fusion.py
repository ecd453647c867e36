"""Galliani-style geometric-consistency fusion of per-view depth maps.

Reference views are swept in ascending id order. A reference pixel is lifted
to 3-D, projected into every other view, the depth stored at the nearest
landed pixel is lifted back and reprojected into the reference. The source view
counts as consistent when the round trip lands within ``max_reproj_px`` and the
stored source depth is within ``max_rel_depth_diff`` (relative) of the depth the
reference point has in that source view. With at least
``min_consistent_views`` consistent views, the mean of the reference point and
the consistent source points is emitted, coloured from the reference image, and
every contributing pixel is marked visited so that it can neither seed nor
support another point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .dataio import PointCloud, Scene, downsample_image
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class FusionParams:
    min_consistent_views: int = 3
    max_reproj_px: float = 1.0
    max_rel_depth_diff: float = 0.01
    min_confidence: float = 0.1

    def __post_init__(self):
        if self.min_consistent_views < 1:
            raise ConfigError("min_consistent_views must be >= 1")
        if not (self.max_reproj_px > 0 and self.max_rel_depth_diff > 0 and self.min_confidence > 0):
            raise ConfigError("fusion thresholds must be positive")


@numba.njit(cache=True)
def _fuse_reference(r, depths, confs, Ks, Rs, ts, visited, min_views, max_px, max_rel, min_conf,
                    out_points, out_pix):
    V, H, W = depths.shape
    n_out = 0
    support = np.empty((V, 2), dtype=np.int64)
    Kr = Ks[r]
    for y in range(H):
        for x in range(W):
            d = depths[r, y, x]
            if d <= 0.0 or visited[r, y, x] or confs[r, y, x] < min_conf:
                continue
            # reference pixel -> world
            xc = (x - Kr[0, 2]) / Kr[0, 0] * d
            yc = (y - Kr[1, 2]) / Kr[1, 1] * d
            X = np.empty(3)
            for i in range(3):
                X[i] = Rs[r, 0, i] * (xc - ts[r, 0]) + Rs[r, 1, i] * (yc - ts[r, 1]) + Rs[r, 2, i] * (d - ts[r, 2])
            acc = X.copy()
            n_cons = 0
            for s in range(V):
                if s == r:
                    continue
                pc = Rs[s] @ X + ts[s]
                if pc[2] <= 0.0:
                    continue
                u = Ks[s, 0, 0] * pc[0] / pc[2] + Ks[s, 0, 2]
                v = Ks[s, 1, 1] * pc[1] / pc[2] + Ks[s, 1, 2]
                iu = int(np.floor(u + 0.5))
                iv = int(np.floor(v + 0.5))
                if iu < 0 or iu >= W or iv < 0 or iv >= H:
                    continue
                ds = depths[s, iv, iu]
                if ds <= 0.0 or visited[s, iv, iu]:
                    continue
                # stored source depth against the depth the reference point has in the source view
                if abs(ds - pc[2]) / pc[2] > max_rel:
                    continue
                sx = (iu - Ks[s, 0, 2]) / Ks[s, 0, 0] * ds
                sy = (iv - Ks[s, 1, 2]) / Ks[s, 1, 1] * ds
                Xs = np.empty(3)
                for i in range(3):
                    Xs[i] = Rs[s, 0, i] * (sx - ts[s, 0]) + Rs[s, 1, i] * (sy - ts[s, 1]) + Rs[s, 2, i] * (ds - ts[s, 2])
                pr = Rs[r] @ Xs + ts[r]
                if pr[2] <= 0.0:
                    continue
                ur = Kr[0, 0] * pr[0] / pr[2] + Kr[0, 2]
                vr = Kr[1, 1] * pr[1] / pr[2] + Kr[1, 2]
                dist = np.sqrt((ur - x) ** 2 + (vr - y) ** 2)
                if dist > max_px:
                    continue
                support[n_cons, 0] = s
                support[n_cons, 1] = iv * W + iu
                n_cons += 1
                acc += Xs
            if n_cons < min_views:
                continue
            visited[r, y, x] = True
            for k in range(n_cons):
                s = support[k, 0]
                visited[s, support[k, 1] // W, support[k, 1] % W] = True
            out_points[n_out] = acc / (n_cons + 1)
            out_pix[n_out, 0] = y
            out_pix[n_out, 1] = x
            n_out += 1
    return n_out


def fuse_depth_maps(depths, confidences, cameras, images, params: FusionParams = FusionParams()) -> PointCloud:
    """Fuse equally sized depth maps (0 = missing) seen by ``cameras``."""
    depths = np.stack([np.asarray(d, dtype=np.float64) for d in depths])
    V, H, W = depths.shape
    if not (len(confidences) == len(cameras) == len(images) == V):
        raise DimensionError("depths, confidences, cameras and images must have one entry per view")
    confs = np.stack([np.asarray(c, dtype=np.float64) for c in confidences])
    if confs.shape != depths.shape:
        raise DimensionError("confidence maps must match the depth maps")
    for cam in cameras:
        if (cam.height, cam.width) != (H, W):
            raise DimensionError("camera size does not match depth map size")
    Ks = np.stack([c.K for c in cameras])
    Rs = np.stack([c.pose.rotation for c in cameras])
    ts = np.stack([c.pose.translation for c in cameras])
    visited = np.zeros(depths.shape, dtype=np.bool_)
    points, colors = [], []
    for r in range(V):
        out_points = np.empty((H * W, 3))
        out_pix = np.empty((H * W, 2), dtype=np.int64)
        n = _fuse_reference(r, depths, confs, Ks, Rs, ts, visited, params.min_consistent_views,
                            params.max_reproj_px, params.max_rel_depth_diff, params.min_confidence,
                            out_points, out_pix)
        points.append(out_points[:n])
        img = np.asarray(images[r])
        colors.append(np.clip(np.rint(img[out_pix[:n, 0], out_pix[:n, 1], :3]), 0, 255).astype(np.uint8))
    return PointCloud(np.concatenate(points), np.concatenate(colors))


def fuse(estimates, scene: Scene, params: FusionParams = FusionParams()) -> PointCloud:
    """Fuse one :class:`~depthprior_mvs.pipeline.DepthEstimate` per scene view.

    ``None`` entries (failed views) contribute nothing.
    """
    estimates = list(estimates)
    if len(estimates) != len(scene.views):
        raise DimensionError(f"got {len(estimates)} estimates for {len(scene.views)} views")
    scales = {e.scale for e in estimates if e is not None}
    if len(scales) > 1:
        raise DimensionError(f"estimates come at mixed scales {sorted(scales)}")
    scale = scales.pop() if scales else 1
    cameras = [v.camera.scaled(scale) for v in scene.views]
    depths, confs, images = [], [], []
    for est, view, cam in zip(estimates, scene.views, cameras):
        if est is None:
            depths.append(np.zeros((cam.height, cam.width)))
            confs.append(np.zeros((cam.height, cam.width)))
        else:
            depths.append(est.depth)
            confs.append(est.confidence)
        images.append(downsample_image(view.image, scale))
    return fuse_depth_maps(depths, confs, cameras, images, params)
