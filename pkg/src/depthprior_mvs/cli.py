"""Command-line front end: ``depthprior-mvs <command> [options]``.

Commands
--------
synth-scene   render a synthetic scene directory
synth-depth   corrupt ground-truth depth into low-quality priors
reconstruct   estimate per-view depth (and confidence) maps
fuse          merge per-view depth maps into a PLY point cloud
evaluate      point-cloud or depth-map metrics as CSV
experiment    texture x prior-mode study on generated scenes

Exit codes: 0 success, 1 internal error, 2 user or configuration error. Errors
are reported as one stderr line ``error[<kind>]: <message>``.

Configuration files are INI files. Recognized sections and keys (defaults in
brackets)::

    [pipeline]     prior_mode [none], prior_range_width [D1/2], n_sources [4],
                   patch [7], regression [soft], temperature [0.02],
                   sparse_stride [2], refine_chain [auto], init_fill_confidence [0.5],
                   stages [4:48:4, 2:32:2, 1:8:1]  (scale:hypotheses:interval_ratio)
    [propagation]  window [3], sigma_color [0.1], sigma_spatial [1.5]
    [gn]           max_iters [3], damping [0.001], step_clamp [1.0], min_valid_sources [1]
    [corruption]   baseline_mm [100], focal_px [2892 at 1600 px width], sigma_d [1/6],
                   downsample [4], seed [0]
    [fusion]       min_consistent_views [3], max_reproj_px [1.0],
                   max_rel_depth_diff [0.01], min_confidence [0.1]
    [eval]         max_dist_mm [20]
    [experiment]   texture_strengths [0.1, 0.5, 1.0], modes [none, range, init],
                   shape [textured_plane], n_views [5], width [160], height [128],
                   seed [0]

Unknown sections or keys are rejected. Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    Scene,
    View,
    downsample_image,
    load_scene,
    read_pfm,
    read_ply,
    require_gt,
    view_filename,
    write_pfm,
    write_ply,
)
from .densify import PropagationParams
from .errors import ConfigError, DimensionError, MissingComponentError, MVSError
from .evaluation import (
    depth_mae,
    depth_stats_rows,
    metrics_csv,
    point_metrics,
    point_metrics_rows,
    reference_cloud,
)
from .fusion import FusionParams, fuse, fuse_depth_maps
from .parallel import set_threads
from .pipeline import PRIOR_MODES, PipelineConfig, StageConfig, reconstruct_scene
from .refine import GNParams
from .sensor_sim import REFERENCE_WIDTH, CorruptionParams, box_downsample, corrupt
from .synthscene import SHAPES, SceneSpec, generate_scene, render_scene

log = logging.getLogger("depthprior_mvs")

# ------------------------------------------------------------------ config file


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "auto", "none") else parse(text)

    return inner


def _list(parse):
    def inner(text):
        return tuple(parse(t.strip()) for t in text.split(",") if t.strip())

    return inner


def _stage(text: str) -> StageConfig:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"stage {text!r} is not scale:hypotheses:interval_ratio")
    return StageConfig(int(parts[0]), int(parts[1]), float(parts[2]))


SCHEMA = {
    "pipeline": {
        "prior_mode": str,
        "prior_range_width": _optional(float),
        "n_sources": int,
        "patch": int,
        "regression": str,
        "temperature": float,
        "sparse_stride": int,
        "refine_chain": _optional(_bool),
        "init_fill_confidence": float,
        "stages": _list(_stage),
    },
    "propagation": {"window": int, "sigma_color": float, "sigma_spatial": float},
    "gn": {"max_iters": int, "damping": float, "step_clamp": float, "min_valid_sources": int},
    "corruption": {"baseline_mm": float, "focal_px": float, "sigma_d": float, "downsample": int, "seed": int},
    "fusion": {
        "min_consistent_views": int,
        "max_reproj_px": float,
        "max_rel_depth_diff": float,
        "min_confidence": float,
    },
    "eval": {"max_dist_mm": float},
    "experiment": {
        "texture_strengths": _list(float),
        "modes": _list(str),
        "shape": str,
        "n_views": int,
        "width": int,
        "height": int,
        "seed": int,
    },
}


def read_config(path) -> dict[str, dict]:
    """Parse an INI configuration file into typed ``{section: {key: value}}``."""
    if path is None:
        return {s: {} for s in SCHEMA}
    path = Path(path)
    if not path.is_file():
        raise MissingComponentError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {' '.join(str(exc).split())}") from None
    out = {s: {} for s in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, text in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from None
    return out


def _overlay(values: dict, **flags) -> dict:
    """File values updated by every flag that was actually given."""
    merged = dict(values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def pipeline_config(cfg: dict, prior_mode: str | None = None) -> PipelineConfig:
    values = _overlay(cfg["pipeline"], prior_mode=prior_mode)
    if "stages" in values:
        values["stages"] = tuple(values["stages"])
    return PipelineConfig(
        **values,
        propagation=PropagationParams(**cfg["propagation"]),
        gn=GNParams(**cfg["gn"]),
    )


def corruption_params(cfg: dict, width: int, **flags) -> CorruptionParams:
    """Corruption parameters for depth maps of the given full-resolution width.

    Without an explicit focal length the reference focal length is rescaled from
    the 1600 px reference width.
    """
    values = _overlay(cfg["corruption"], **flags)
    explicit_focal = "focal_px" in values
    params = CorruptionParams(**values)
    return params if explicit_focal else params.for_width(width)


def view_seed(seed: int, view_id: int) -> int:
    """Independent noise stream per view, derived from the run seed."""
    return int(np.random.SeedSequence([seed, view_id]).generate_state(1, np.uint64)[0])


# --------------------------------------------------------------------- commands


def cmd_synth_scene(args, cfg):
    spec = SceneSpec(
        shape=args.shape,
        texture_strength=args.texture,
        n_views=args.n_views,
        image_size=(args.width, args.height),
        ring_radius_mm=args.ring_radius_mm,
        target_distance_mm=args.target_distance_mm,
        seed=args.seed,
    )
    scene = generate_scene(spec, args.out)
    print(f"wrote {len(scene.views)} views to {args.out}")


def cmd_synth_depth(args, cfg):
    flags = dict(baseline_mm=args.baseline_mm, focal_px=args.focal_px, sigma_d=args.sigma_d,
                 downsample=args.downsample, seed=args.seed)
    if args.input is not None:
        depth = read_pfm(args.input)
        params = corruption_params(cfg, depth.shape[1], **flags)
        write_pfm(corrupt(depth, params, threads=args.threads_resolved), args.out)
        print(f"wrote {args.out}")
        return
    scene_dir = Path(args.scene)
    if not (scene_dir / "depths_gt").is_dir():
        raise MissingComponentError(f"{scene_dir}: missing component 'depths_gt/'")
    scene = load_scene(scene_dir)
    require_gt(scene)
    out_dir = Path(args.out) if args.out else scene_dir / "depths_prior"
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(scene.views):
        params = corruption_params(cfg, view.camera.width, **flags)
        params = replace(params, seed=view_seed(params.seed, i))
        gt = view.gt_depth
        factor = params.downsample * view.gt_scale
        # corruption always acts on full-resolution depth; the prior lands at 1/factor
        prior = corrupt(gt, params, threads=args.threads_resolved)
        if prior.shape != (view.camera.height // factor, view.camera.width // factor):
            raise DimensionError(f"view {i}: image size is not divisible by the downsample factor {factor}")
        write_pfm(prior, out_dir / view_filename(i, ".pfm"))
    print(f"wrote {len(scene.views)} priors to {out_dir}")


def _gt_at(view: View, scale: int) -> np.ndarray | None:
    if view.gt_depth is None or scale % view.gt_scale:
        return None
    return box_downsample(view.gt_depth, scale // view.gt_scale)


def cmd_reconstruct(args, cfg):
    scene = load_scene(args.scene)
    config = pipeline_config(cfg, args.prior)
    result = reconstruct_scene(scene, config)
    out = Path(args.out)
    (out / "depths").mkdir(parents=True, exist_ok=True)
    (out / "confidence").mkdir(exist_ok=True)
    rows = []
    for i, est in enumerate(result.estimates):
        if est is None:
            continue
        write_pfm(est.depth, out / "depths" / view_filename(i, ".pfm"))
        write_pfm(est.confidence, out / "confidence" / view_filename(i, ".pfm"))
        gt = _gt_at(scene.views[i], est.scale)
        if gt is not None:
            rows += [(name, value, f"view={i}" + (f";{p}" if p else "")) for name, value, p in
                     depth_stats_rows(depth_mae(est.depth, gt))]
    if rows:
        (out / "depth_mae.csv").write_text(metrics_csv(rows))
    done = len(result.estimates) - len(result.failures)
    print(f"reconstructed {done}/{len(result.estimates)} views into {out}")
    if result.failures:
        detail = "; ".join(f"view {i}: {msg}" for i, msg in sorted(result.failures.items()))
        raise MVSError(f"{len(result.failures)} view(s) failed: {detail}")


def _load_depths(directory: Path, scene: Scene):
    depth_dir = directory / "depths" if (directory / "depths").is_dir() else directory
    conf_dir = directory / "confidence"
    depths, confs = [], []
    scale = None
    for i, view in enumerate(scene.views):
        path = depth_dir / view_filename(i, ".pfm")
        if not path.is_file():
            depths.append(None)
            confs.append(None)
            continue
        depth = read_pfm(path)
        h, w = depth.shape
        if view.camera.height % h or view.camera.width % w or view.camera.height // h != view.camera.width // w:
            raise DimensionError(f"{path}: {w}x{h} is not an integer divisor of the image size")
        s = view.camera.height // h
        if scale not in (None, s):
            raise DimensionError(f"{path}: depth maps come at mixed scales")
        scale = s
        cpath = conf_dir / view_filename(i, ".pfm")
        depths.append(depth)
        confs.append(read_pfm(cpath) if cpath.is_file() else np.ones_like(depth))
    if scale is None:
        raise MissingComponentError(f"{directory}: no depth maps found")
    cameras = [v.camera.scaled(scale) for v in scene.views]
    depths = [np.zeros((c.height, c.width), np.float32) if d is None else d for d, c in zip(depths, cameras)]
    confs = [np.zeros_like(d) if c is None else c for d, c in zip(depths, confs)]
    images = [downsample_image(v.image, scale) for v in scene.views]
    return depths, confs, cameras, images


def cmd_fuse(args, cfg):
    scene = load_scene(args.scene)
    depths, confs, cameras, images = _load_depths(Path(args.depths), scene)
    params = FusionParams(**_overlay(
        cfg["fusion"], min_consistent_views=args.min_views, max_reproj_px=args.reproj_px,
        max_rel_depth_diff=args.rel_depth, min_confidence=args.min_conf,
    ))
    cloud = fuse_depth_maps(depths, confs, cameras, images, params)
    write_ply(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_evaluate(args, cfg):
    if args.target == "pointcloud":
        max_dist = _overlay(cfg["eval"], max_dist_mm=args.max_dist_mm).get("max_dist_mm", 20.0)
        metrics = point_metrics(read_ply(args.recon), read_ply(args.ref), max_dist)
        _emit(metrics_csv(point_metrics_rows(metrics)), args.out)
    else:
        _emit(metrics_csv(depth_stats_rows(depth_mae(read_pfm(args.pred), read_pfm(args.gt)))), args.out)


EXPERIMENT_DEFAULTS = {
    "texture_strengths": (0.1, 0.5, 1.0),
    "modes": PRIOR_MODES,
    "shape": "textured_plane",
    "n_views": 5,
    "width": 160,
    "height": 128,
    "seed": 0,
}

EXPERIMENT_COLUMNS = ("scene", "mode", "mae_mm", "accuracy_mm", "completeness_mm", "overall_mm")


def _with_priors(scene: Scene, cfg: dict, threads: int) -> Scene:
    views = []
    for i, view in enumerate(scene.views):
        params = corruption_params(cfg, view.camera.width)
        params = replace(params, seed=view_seed(params.seed, i))
        views.append(replace(view, prior_depth=corrupt(view.gt_depth, params, threads=threads),
                             prior_scale=params.downsample))
    return replace(scene, views=views)


def run_experiment(cfg: dict, threads: int = 1) -> list[tuple]:
    """One row per (texture, mode): pooled depth MAE and fused-cloud metrics."""
    exp = _overlay(EXPERIMENT_DEFAULTS, **cfg["experiment"])
    if not exp["texture_strengths"]:
        raise ConfigError("experiment spec lists zero scenes (texture_strengths is empty)")
    for mode in exp["modes"]:
        if mode not in PRIOR_MODES:
            raise ConfigError(f"unknown prior mode {mode!r}; expected one of {PRIOR_MODES}")
    fusion = FusionParams(**cfg["fusion"])
    max_dist = cfg["eval"].get("max_dist_mm", 20.0)
    rows = []
    for tex in exp["texture_strengths"]:
        spec = SceneSpec(shape=exp["shape"], texture_strength=tex, n_views=exp["n_views"],
                         image_size=(exp["width"], exp["height"]), seed=exp["seed"])
        scene = _with_priors(render_scene(spec), cfg, threads)
        reference = reference_cloud([v.gt_depth for v in scene.views], [v.camera for v in scene.views])
        for mode in exp["modes"]:
            result = reconstruct_scene(scene, pipeline_config(cfg, mode))
            errors, counts = 0.0, 0
            for est, view in zip(result.estimates, scene.views):
                if est is None:
                    continue
                stats = depth_mae(est.depth, _gt_at(view, est.scale))
                errors += stats.mae_mm * stats.n_evaluated
                counts += stats.n_evaluated
            cloud = fuse(result.estimates, scene, fusion)
            if len(cloud):
                m = point_metrics(cloud, reference, max_dist)
                acc, comp, overall = m.accuracy_mm, m.completeness_mm, m.overall_mm
            else:
                acc = comp = overall = float("nan")
            name = f"{exp['shape']}_texture{tex:g}"
            rows.append((name, mode, errors / counts if counts else float("nan"), acc, comp, overall))
    return rows


def experiment_csv(rows) -> str:
    lines = [",".join(EXPERIMENT_COLUMNS)]
    for scene, mode, *values in rows:
        lines.append(",".join([scene, mode] + [f"{v:.6f}" for v in values]))
    return "\n".join(lines) + "\n"


def experiment_summary(rows) -> str:
    out = [f"{'scene':<28} {'mode':<6} {'mae_mm':>9} {'overall_mm':>11}"]
    for scene, mode, mae, _, _, overall in rows:
        out.append(f"{scene:<28} {mode:<6} {mae:9.3f} {overall:11.3f}")
    return "\n".join(out) + "\n"


def cmd_experiment(args, cfg):
    rows = run_experiment(cfg, args.threads_resolved)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(experiment_csv(rows))
    summary = experiment_summary(rows)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI configuration file (flags override it)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (default: $DEPTHPRIOR_MVS_THREADS, else all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="depthprior-mvs",
        description="Multi-view stereo with optional low-quality depth priors.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Configuration files" + __doc__.split("Configuration files", 1)[1],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    dflt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth-scene", parents=[common], formatter_class=dflt, help="render a synthetic scene")
    p.add_argument("--out", required=True, help="scene directory to write")
    p.add_argument("--shape", choices=SHAPES, default="textured_plane")
    p.add_argument("--texture", type=float, default=1.0, help="albedo texture strength in [0, 1]")
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--ring-radius-mm", type=float, default=250.0)
    p.add_argument("--target-distance-mm", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("synth-depth", parents=[common], formatter_class=dflt,
                       help="corrupt ground-truth depth into priors")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene directory; writes depths_prior/ (or --out) per view")
    src.add_argument("--in", dest="input", help="single ground-truth PFM")
    p.add_argument("--out", help="output PFM (with --in) or directory (with --scene)")
    p.add_argument("--baseline-mm", type=float, help="virtual stereo baseline [100]")
    p.add_argument("--focal-px", type=float,
                   help=f"focal length in px [2892, rescaled from {REFERENCE_WIDTH} px to the depth width]")
    p.add_argument("--sigma-d", type=float, help="disparity noise std in px [1/6]")
    p.add_argument("--downsample", type=int, help="box downsample factor [4]")
    p.add_argument("--seed", type=int, help="noise seed [0]")
    p.set_defaults(func=cmd_synth_depth)

    p = sub.add_parser("reconstruct", parents=[common], formatter_class=dflt, help="estimate depth maps")
    p.add_argument("--scene", required=True)
    p.add_argument("--prior", choices=PRIOR_MODES, help="prior injection mode [none]")
    p.add_argument("--out", required=True, help="writes depths/, confidence/ and depth_mae.csv")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fuse", parents=[common], formatter_class=dflt, help="fuse depth maps into a PLY")
    p.add_argument("--scene", required=True)
    p.add_argument("--depths", required=True, help="reconstruct output directory or a directory of PFMs")
    p.add_argument("--out", required=True, help="output PLY")
    p.add_argument("--min-views", type=int, help="consistent source views required [3]")
    p.add_argument("--reproj-px", type=float, help="max round-trip reprojection error [1.0]")
    p.add_argument("--rel-depth", type=float, help="max relative depth difference [0.01]")
    p.add_argument("--min-conf", type=float, help="minimum confidence of a seed pixel [0.1]")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=dflt, help="metrics as CSV")
    ev = p.add_subparsers(dest="target", required=True)
    q = ev.add_parser("pointcloud", parents=[common], formatter_class=dflt)
    q.add_argument("--recon", required=True)
    q.add_argument("--ref", required=True)
    q.add_argument("--max-dist-mm", type=float, help="outlier cap [20]")
    q.add_argument("--out", help="CSV path (default: stdout)")
    q = ev.add_parser("depth", parents=[common], formatter_class=dflt)
    q.add_argument("--pred", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], formatter_class=dflt,
                       help="texture x prior-mode study")
    p.add_argument("--spec", help="INI file with an [experiment] section (and any other section)")
    p.add_argument("--out", required=True, help="writes results.csv and summary.txt")
    p.set_defaults(func=cmd_experiment)
    return parser


def _error_line(kind: str, exc: BaseException) -> str:
    return f"error[{kind}]: {' '.join(str(exc).split())}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(getattr(args, "spec", None) or args.config)
        if getattr(args, "spec", None) and args.config:
            # an explicit --config is layered over the experiment spec
            for section, values in read_config(args.config).items():
                cfg[section].update(values)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        args.threads_resolved = set_threads(args.threads)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args, cfg)
    except MVSError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return 2
    except OSError as exc:
        # unreadable or missing paths are user errors too
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        print(_error_line("internal", exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
