"""Per-view depth estimation: a coarse-to-fine plane-sweep cascade, optionally
followed by sparse estimation, propagation and Gauss-Newton refinement, with two
ways of injecting a low-quality depth prior.

Prior modes
-----------
``none``
    Stage 1 sweeps the camera's global depth range.
``range``
    Stage 1 hypotheses are re-centred per pixel on the prior (same count, span
    ``prior +- prior_range_width * interval_1``); pixels without a prior keep
    the global hypotheses. This acts as a stage "zero" feeding the cascade.
``init``
    The cascade runs as in ``none``; afterwards the prior fills the holes and
    low-confidence samples of the sparse final-stage estimate before
    propagation and refinement. This is a non-learned analogue of feeding the
    depth to the network as an extra input channel, not an equivalent of it.

By default ``none`` and ``init`` finish with the sparse -> propagate -> refine
chain while ``range`` keeps a dense final stage (``refine_chain`` overrides).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import Scene, View, downsample_image, require_prior
from .densify import PropagationParams, expand_sparse, propagate
from .errors import ConfigError, MVSError
from .geometry import Camera
from .matcher import HypothesisSet, build_cost_volume, extract_features, output_shape, regress_depth
from .refine import GNParams, GNResult, gauss_newton

log = logging.getLogger(__name__)

PRIOR_MODES = ("none", "range", "init")


@dataclass(frozen=True)
class StageConfig:
    scale: int
    n_hypotheses: int
    interval_ratio: float  # multiple of the camera's depth_interval
    interval_mm: float | None = None  # absolute override

    def __post_init__(self):
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ConfigError(f"stage scale must be a power of 2, got {self.scale}")
        if self.n_hypotheses < 2:
            raise ConfigError("a stage needs at least 2 hypotheses")
        if not self.interval_ratio > 0 or (self.interval_mm is not None and not self.interval_mm > 0):
            raise ConfigError("stage interval must be positive")

    def interval(self, camera: Camera) -> float:
        if self.interval_mm is not None:
            return float(self.interval_mm)
        return self.interval_ratio * camera.depth_interval


DEFAULT_STAGES = (StageConfig(4, 48, 4.0), StageConfig(2, 32, 2.0), StageConfig(1, 8, 1.0))


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageConfig, ...] = DEFAULT_STAGES
    prior_mode: str = "none"
    prior_range_width: float | None = None  # in stage-1 intervals; None -> D1 / 2
    n_sources: int = 4
    patch: int = 7
    regression: str = "soft"
    temperature: float = 0.02
    sparse_stride: int = 2
    refine_chain: bool | None = None  # None -> on for none/init, off for range
    init_fill_confidence: float = 0.5
    propagation: PropagationParams = field(default_factory=PropagationParams)
    gn: GNParams = field(default_factory=GNParams)

    def __post_init__(self):
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if not self.stages:
            raise ConfigError("need at least one stage")
        scales = [s.scale for s in self.stages]
        if any(b > a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"stage scales must be non-increasing, got {scales}")
        if self.prior_range_width is not None and not self.prior_range_width > 0:
            raise ConfigError("prior_range_width must be positive")
        if self.n_sources < 1:
            raise ConfigError("n_sources must be >= 1")
        if self.sparse_stride < 1:
            raise ConfigError("sparse_stride must be >= 1")
        if self.regression not in ("wta", "soft"):
            raise ConfigError(f"unknown regression mode {self.regression!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @property
    def uses_chain(self) -> bool:
        if self.refine_chain is not None:
            return self.refine_chain
        return self.prior_mode in ("none", "init")

    @property
    def range_width(self) -> float:
        if self.prior_range_width is not None:
            return self.prior_range_width
        return self.stages[0].n_hypotheses / 2.0

    @property
    def final_scale(self) -> int:
        return self.stages[-1].scale


@dataclass(eq=False)
class StageResult:
    scale: int
    depth: np.ndarray
    confidence: np.ndarray
    hypotheses: HypothesisSet
    stride: int = 1


@dataclass(eq=False)
class DepthEstimate:
    view_id: int
    depth: np.ndarray
    confidence: np.ndarray
    scale: int
    stages: list[StageResult]
    # per-stage maps for loss evaluation: stage k -> (estimate, refined or None)
    stage_depths: list[tuple[np.ndarray, np.ndarray | None]]
    dense: np.ndarray | None = None
    refined: np.ndarray | None = None
    gn: GNResult | None = None
    prior_fallback: int = 0  # pixels whose prior was missing in range mode
    warnings: list[str] = field(default_factory=list)


# ------------------------------------------------------------------ resampling


def scaled_view(view: View, factor: int) -> View:
    if factor == 1:
        return view
    return View(downsample_image(view.image, factor), view.camera.scaled(factor))


def resample_nearest(depth: np.ndarray, src_scale: int, dst_scale: int, dst_shape, dst_stride: int = 1) -> np.ndarray:
    """Nearest-neighbour resampling between grids of different scales.

    Destination pixel ``x`` is pixel ``dst_stride * x`` of the image at
    ``dst_scale``; its full-resolution centre picks the source pixel. Holes (0)
    stay holes; no value is ever interpolated.
    """
    H, W = dst_shape
    step = dst_scale * dst_stride
    ys = ((step * np.arange(H) + (dst_scale - 1) / 2.0) // src_scale).astype(int)
    xs = ((step * np.arange(W) + (dst_scale - 1) / 2.0) // src_scale).astype(int)
    ys = np.clip(ys, 0, depth.shape[0] - 1)
    xs = np.clip(xs, 0, depth.shape[1] - 1)
    return depth[np.ix_(ys, xs)]


# ------------------------------------------------------------------ hypotheses


def centered_hypotheses(center: np.ndarray, count: int, interval: float) -> HypothesisSet:
    """``center + (i - (D-1)/2) * interval``; missing centres get an all-zero row."""
    offsets = (np.arange(count) - (count - 1) / 2.0) * interval
    center = np.asarray(center, dtype=np.float64)
    hyps = center[..., None] + offsets
    hyps[center <= 0] = 0.0
    return HypothesisSet(hyps)


def global_hypotheses(camera: Camera, stage: StageConfig) -> HypothesisSet:
    return HypothesisSet.uniform(camera.depth_min, stage.interval(camera), stage.n_hypotheses)


def prior_range_hypotheses(
    prior: np.ndarray, camera: Camera, stage: StageConfig, width: float
) -> tuple[HypothesisSet, int]:
    """Stage-1 hypotheses spanning ``prior +- width * interval`` where the prior
    is valid and the global range elsewhere. Returns the set and the number of
    fallback pixels."""
    D = stage.n_hypotheses
    glob = global_hypotheses(camera, stage).depths
    half = width * stage.interval(camera)
    t = np.linspace(-1.0, 1.0, D)
    prior = np.asarray(prior, dtype=np.float64)
    valid = prior > 0
    hyps = np.broadcast_to(glob, prior.shape + (D,)).copy()
    hyps[valid] = prior[valid][:, None] + half * t
    return HypothesisSet(hyps), int((~valid).sum())


# -------------------------------------------------------------------- pipeline


class _Pyramid:
    """Scaled copies of the scene's views, built on demand."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self._cache: dict[tuple[int, int], View] = {}

    def view(self, view_id: int, scale: int) -> View:
        key = (view_id, scale)
        if key not in self._cache:
            self._cache[key] = scaled_view(self.scene.views[view_id], scale)
        return self._cache[key]


def _select_sources(scene: Scene, ref_id: int, config: PipelineConfig) -> list[int]:
    if not 0 <= ref_id < len(scene.views):
        raise ConfigError(f"reference view {ref_id} out of range")
    if not scene.pairs or not scene.pairs[ref_id]:
        raise ConfigError(f"view {ref_id} has no source views in the pair table")
    return scene.sources(ref_id)[: config.n_sources]


def estimate_depth(scene: Scene, ref_id: int, config: PipelineConfig = PipelineConfig(), _pyramid=None) -> DepthEstimate:
    pyramid = _pyramid or _Pyramid(scene)
    src_ids = _select_sources(scene, ref_id, config)
    ref_full = scene.views[ref_id]
    if config.prior_mode != "none" and ref_full.prior_depth is None:
        raise ConfigError(f"prior_mode={config.prior_mode!r} needs a prior depth map for view {ref_id}")

    warnings: list[str] = []
    stages: list[StageResult] = []
    fallback = 0
    prev: StageResult | None = None
    chain = config.uses_chain
    n_stages = len(config.stages)

    for k, stage in enumerate(config.stages):
        s = stage.scale
        ref = pyramid.view(ref_id, s)
        sources = [pyramid.view(i, s) for i in src_ids]
        stride = config.sparse_stride if (chain and k == n_stages - 1) else 1
        out_shape = output_shape(ref.camera.height, ref.camera.width, stride)

        if prev is None:
            if config.prior_mode == "range":
                prior = resample_nearest(ref_full.prior_depth, ref_full.prior_scale, s, out_shape, stride)
                hyps, fallback = prior_range_hypotheses(prior, ref_full.camera, stage, config.range_width)
                if fallback == prior.size:
                    warnings.append("prior is missing everywhere; stage 1 uses the global range")
                    log.warning("view %d: prior missing everywhere, falling back to global range", ref_id)
            else:
                hyps = global_hypotheses(ref_full.camera, stage)
        else:
            center = resample_nearest(prev.depth, prev.scale, s, out_shape, stride)
            hyps = centered_hypotheses(center, stage.n_hypotheses, stage.interval(ref_full.camera))

        vol = build_cost_volume(ref, sources, hyps, config.patch, stride)
        depth, conf = regress_depth(vol, hyps, config.regression, config.temperature)
        prev = StageResult(s, depth, conf, hyps, stride)
        stages.append(prev)

    final = stages[-1]
    stage_depths: list[tuple[np.ndarray, np.ndarray | None]] = [(st.depth, None) for st in stages]
    if not chain:
        return DepthEstimate(ref_id, final.depth, final.confidence, final.scale, stages, stage_depths,
                             prior_fallback=fallback, warnings=warnings)

    s = final.scale
    ref = pyramid.view(ref_id, s)
    shape = (ref.camera.height, ref.camera.width)
    sparse, sparse_conf = final.depth.copy(), final.confidence.copy()
    if config.prior_mode == "init":
        prior = resample_nearest(ref_full.prior_depth, ref_full.prior_scale, s, sparse.shape, final.stride)
        holes = ((sparse <= 0) | (sparse_conf < config.init_fill_confidence)) & (prior > 0)
        sparse[holes] = prior[holes]
        sparse_conf[holes] = config.init_fill_confidence
    dense = propagate(expand_sparse(sparse, final.stride, shape), ref.image, config.propagation)
    # each pixel inherits the confidence of the sparse sample at the top-left of its stride block
    confidence = np.repeat(np.repeat(sparse_conf, final.stride, 0), final.stride, 1)[: shape[0], : shape[1]]
    confidence = np.where(dense > 0, confidence, 0.0).astype(np.float32)

    ref_feat = extract_features(ref.image)
    src_views = [pyramid.view(i, s) for i in src_ids]
    gn = gauss_newton(
        dense, ref_feat, [extract_features(v.image) for v in src_views],
        (ref.camera, [v.camera for v in src_views]), config.gn,
    )
    stage_depths[-1] = (dense, gn.depth)
    return DepthEstimate(ref_id, gn.depth, confidence, s, stages, stage_depths, dense=dense,
                         refined=gn.depth, gn=gn, prior_fallback=fallback, warnings=warnings)


@dataclass(eq=False)
class SceneReconstruction:
    estimates: list[DepthEstimate | None]
    failures: dict[int, str]

    def __iter__(self):
        return iter(self.estimates)

    def __len__(self):
        return len(self.estimates)


def reconstruct_scene(scene: Scene, config: PipelineConfig = PipelineConfig()) -> SceneReconstruction:
    """Estimate depth for every view. Per-view failures are reported, not raised."""
    if config.prior_mode != "none":
        require_prior(scene)
    pyramid = _Pyramid(scene)
    estimates: list[DepthEstimate | None] = []
    failures: dict[int, str] = {}
    for i in range(len(scene.views)):
        try:
            estimates.append(estimate_depth(scene, i, config, _pyramid=pyramid))
        except MVSError as exc:
            log.error("view %d failed: %s", i, exc)
            failures[i] = str(exc)
            estimates.append(None)
    return SceneReconstruction(estimates, failures)
