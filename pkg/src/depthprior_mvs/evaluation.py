"""Depth-map error statistics, loss functionals used as offline quality scores,
and point-cloud accuracy / completeness / overall."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dataio import PointCloud
from .geometry import backproject
from .errors import ConfigError, DimensionError, MVSError

INLIER_THRESHOLDS_MM = (2.0, 4.0, 8.0)
DEFAULT_STAGE_WEIGHTS = (0.5, 1.0, 2.0)


class EmptyValidSetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DepthErrorStats:
    mae_mm: float
    valid_fraction: float  # share of valid-gt pixels that have a prediction
    inlier_ratios: dict = field(default_factory=dict)  # threshold mm -> ratio
    n_evaluated: int = 0


def _same_shape(*maps):
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"resolution mismatch: {sorted(shapes)}")


def depth_mae(pred: np.ndarray, gt: np.ndarray, thresholds=INLIER_THRESHOLDS_MM) -> DepthErrorStats:
    """Mean absolute error over pixels with non-zero reference depth.

    Pixels where the prediction is missing are left out of the mean and show up
    in ``valid_fraction`` instead.
    """
    _same_shape(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    ref_valid = gt > 0
    both = ref_valid & (pred > 0)
    n_ref = int(ref_valid.sum())
    n = int(both.sum())
    err = np.abs(pred[both] - gt[both])
    mae = float(err.mean()) if n else 0.0
    ratios = {t: (float((err < t).mean()) if n else 0.0) for t in thresholds}
    return DepthErrorStats(mae, n / n_ref if n_ref else 0.0, ratios, n)


@dataclass(frozen=True)
class LossValue:
    total: float
    mean: float
    n_valid: int


def _l1_over_valid(est, gt):
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0
    return float(np.abs(np.asarray(est, dtype=np.float64)[valid] - gt[valid]).sum()), int(valid.sum())


def fastmvs_loss(dense: np.ndarray, refined: np.ndarray | None, gt: np.ndarray) -> LossValue:
    """Sum over valid ground-truth pixels of ``|dense - gt| + |refined - gt|``.

    ``refined=None`` drops the second term. Missing predictions count as 0.
    ``mean`` divides by the number of valid pixels.
    """
    maps = [dense, gt] if refined is None else [dense, refined, gt]
    _same_shape(*maps)
    total, n = _l1_over_valid(dense, gt)
    if refined is not None:
        total += _l1_over_valid(refined, gt)[0]
    if n == 0:
        warnings.warn("loss evaluated over an empty valid set", EmptyValidSetWarning, stacklevel=2)
        return LossValue(0.0, 0.0, 0)
    return LossValue(total, total / n, n)


def cas_loss(stage_estimates, stage_gts, weights=DEFAULT_STAGE_WEIGHTS) -> float:
    """Weighted sum of per-stage losses.

    ``stage_estimates`` holds ``(estimate, refined_or_None)`` per stage (a bare
    array means no refined map); ``stage_gts`` the ground truth at each stage's
    resolution.
    """
    weights = tuple(float(w) for w in weights)
    if any(w <= 0 for w in weights):
        raise ConfigError("stage weights must be positive")
    if not (len(stage_estimates) == len(stage_gts) == len(weights)):
        raise ConfigError(
            f"stage count mismatch: {len(stage_estimates)} estimates, {len(stage_gts)} gts, {len(weights)} weights"
        )
    total = 0.0
    for lam, est, gt in zip(weights, stage_estimates, stage_gts):
        dense, refined = est if isinstance(est, tuple) else (est, None)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyValidSetWarning)
            total += lam * fastmvs_loss(dense, refined, gt).total
    return total


def weighted_stage_sum(stage_losses, weights=DEFAULT_STAGE_WEIGHTS) -> float:
    if len(stage_losses) != len(weights):
        raise ConfigError("stage count mismatch")
    return float(sum(w * l for w, l in zip(weights, stage_losses)))


@dataclass(frozen=True)
class PointMetrics:
    accuracy_mm: float
    completeness_mm: float
    overall_mm: float
    accuracy_inliers: int
    completeness_inliers: int
    accuracy_outliers: int
    completeness_outliers: int
    max_dist_mm: float


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest reference point (k-d tree)."""
    tree = cKDTree(np.asarray(reference, dtype=np.float64))
    dist, _ = tree.query(np.asarray(query, dtype=np.float64), k=1)
    return dist


def reference_cloud(depths, cameras) -> PointCloud:
    """Back-project every valid pixel of full-resolution depth maps (e.g. ground truth)."""
    points = []
    for depth, cam in zip(depths, cameras):
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise DimensionError("depth map and camera disagree in size")
        v, u = np.nonzero(depth > 0)
        points.append(backproject(cam, np.stack([u, v], -1).astype(np.float64), depth[v, u]))
    return PointCloud(np.concatenate(points) if points else np.zeros((0, 3)))


def _capped_mean(dist, cap):
    keep = dist <= cap
    return (float(dist[keep].mean()) if keep.any() else float("nan")), int(keep.sum()), int((~keep).sum())


def point_metrics(recon: PointCloud, reference: PointCloud, max_dist_mm: float = 20.0) -> PointMetrics:
    """Accuracy (recon -> reference), completeness (reference -> recon) and their mean.

    Distances above ``max_dist_mm`` are excluded from the means and reported as
    outliers; pass ``inf`` for uncapped means.
    """
    if len(recon) == 0:
        raise MVSError("point_metrics: the reconstruction cloud is empty")
    if len(reference) == 0:
        raise MVSError("point_metrics: the reference cloud is empty")
    if not max_dist_mm > 0:
        raise ConfigError("max_dist_mm must be positive")
    acc, acc_in, acc_out = _capped_mean(nearest_distances(recon.points, reference.points), max_dist_mm)
    comp, comp_in, comp_out = _capped_mean(nearest_distances(reference.points, recon.points), max_dist_mm)
    return PointMetrics(acc, comp, (acc + comp) / 2.0, acc_in, comp_in, acc_out, comp_out, float(max_dist_mm))


def metrics_csv(rows) -> str:
    """CSV report with header ``metric,value,parameters``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "parameters"])
    for name, value, params in rows:
        writer.writerow([name, f"{value:.6f}" if isinstance(value, float) else value, params])
    return buf.getvalue()


def point_metrics_rows(m: PointMetrics):
    p = f"max_dist_mm={m.max_dist_mm:g}"
    return [
        ("accuracy_mm", m.accuracy_mm, p),
        ("completeness_mm", m.completeness_mm, p),
        ("overall_mm", m.overall_mm, p),
        ("accuracy_outliers", m.accuracy_outliers, p),
        ("completeness_outliers", m.completeness_outliers, p),
    ]


def depth_stats_rows(s: DepthErrorStats):
    rows = [("mae_mm", s.mae_mm, ""), ("valid_fraction", s.valid_fraction, "")]
    rows += [(f"inlier_ratio", r, f"threshold_mm={t:g}") for t, r in s.inlier_ratios.items()]
    return rows
