"""Deterministic ray-cast scenes with analytically exact ground-truth depth.

Two shapes are available: a textured ground plane (``z = 0``) and the same
plane with a sphere centred at the origin. Cameras sit on a horizontal ring
above the plane and look at the origin. Albedo is seeded value noise on a
3-D lattice (trilinear, three octaves) evaluated at the world hit point, so the
texture is glued to the surface and the images are photo-consistent; shading is
Lambertian under a fixed directional light.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Scene, View, write_scene
from .errors import ConfigError
from .geometry import Camera, CameraIntrinsics, look_at

SHAPES = ("textured_plane", "sphere_on_plane")
LIGHT_DIR = np.array([0.3, -0.4, 1.0]) / np.linalg.norm([0.3, -0.4, 1.0])
AMBIENT = 0.25
TINT = np.array([1.0, 0.96, 0.9])
# (lattice spacing in mm, weight)
OCTAVES = ((24.0, 0.5), (12.0, 0.3), (6.0, 0.2))
DEPTH_MARGIN = 0.2
STAGE1_HYPOTHESES = 48
STAGE1_INTERVAL_RATIO = 4
# DTU-like field of view: f = 2892 px at 1600 px width
FOCAL_PER_WIDTH = 2892.0 / 1600.0


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "textured_plane"
    texture_strength: float = 1.0
    n_views: int = 5
    image_size: tuple[int, int] = (160, 128)
    ring_radius_mm: float = 250.0
    target_distance_mm: float = 1000.0
    sphere_radius_mm: float = 120.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if not 0.0 <= self.texture_strength <= 1.0:
            raise ConfigError("texture_strength must lie in [0, 1]")
        if self.n_views < 2:
            raise ConfigError("n_views must be at least 2")
        w, h = self.image_size
        if w < 32 or h < 32:
            raise ConfigError("image_size must be at least 32x32")
        if not 0 <= self.ring_radius_mm < self.target_distance_mm:
            raise ConfigError("ring_radius_mm must lie in [0, target_distance_mm)")
        if self.shape == "sphere_on_plane" and not self.sphere_radius_mm > 0:
            raise ConfigError("sphere_radius_mm must be positive")


# ----------------------------------------------------------------- value noise


def _lattice_values(ix, iy, iz, seed: int, octave: int) -> np.ndarray:
    """Hash integer lattice coordinates to uniform values in [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        h ^= np.uint64((seed * 0x27D4EB2F165667C5 + octave * 0x94D049BB133111EB) % 2**64)
        # splitmix64 finaliser
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Multi-octave trilinear value noise in [0, 1] at world points ``(..., 3)``."""
    total = np.zeros(points.shape[:-1])
    for octave, (spacing, weight) in enumerate(OCTAVES):
        p = points / spacing
        base = np.floor(p)
        frac = p - base
        base = base.astype(np.int64)
        acc = np.zeros(points.shape[:-1])
        for dx in (0, 1):
            wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
            for dy in (0, 1):
                wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
                for dz in (0, 1):
                    wz = frac[..., 2] if dz else 1.0 - frac[..., 2]
                    val = _lattice_values(
                        base[..., 0] + dx, base[..., 1] + dy, base[..., 2] + dz, seed, octave
                    )
                    acc += wx * wy * wz * val
        total += weight * acc
    return total / sum(w for _, w in OCTAVES)


# -------------------------------------------------------------------- rendering


def rig_cameras(spec: SceneSpec, depth_range=None) -> list[Camera]:
    """Cameras on the ring; ``depth_range`` per view (min, max) sets the sampling range."""
    w, h = spec.image_size
    f = FOCAL_PER_WIDTH * w
    intr = CameraIntrinsics(f, f, w / 2.0, h / 2.0, w, h)
    height = math.sqrt(spec.target_distance_mm**2 - spec.ring_radius_mm**2)
    cams = []
    for i in range(spec.n_views):
        theta = 2.0 * math.pi * i / spec.n_views
        center = (spec.ring_radius_mm * math.cos(theta), spec.ring_radius_mm * math.sin(theta), height)
        pose = look_at(center, (0.0, 0.0, 0.0))
        if depth_range is None:
            dmin, dinterval = spec.target_distance_mm, 1.0
        else:
            dmin, dinterval = sampling_range(*depth_range[i])
        cams.append(Camera(intr, pose, dmin, dinterval))
    return cams


def sampling_range(true_min: float, true_max: float) -> tuple[float, float]:
    """``(depth_min, depth_interval)`` bracketing ``[true_min, true_max]`` with a
    20 % depth margin on both ends, spanned by the 48 stage-1 hypotheses at
    4x the base interval."""
    lo = (1.0 - DEPTH_MARGIN) * true_min
    hi = (1.0 + DEPTH_MARGIN) * true_max
    return lo, (hi - lo) / ((STAGE1_HYPOTHESES - 1) * STAGE1_INTERVAL_RATIO)


def cast_rays(camera: Camera, spec: SceneSpec):
    """Ray-cast one view. Returns ``(depth, world_points, normals, hit)``;
    ``depth`` is float64 camera-frame z, 0 where the ray misses."""
    intr = camera.intrinsics
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    # world-space ray direction scaled so that the ray parameter equals camera z
    dirs = dirs_cam @ camera.pose.rotation
    origin = camera.pose.center

    depth = np.full(u.shape, np.inf)
    normals = np.zeros(u.shape + (3,))
    with np.errstate(divide="ignore", invalid="ignore"):
        s_plane = -origin[2] / dirs[..., 2]
    plane_hit = np.isfinite(s_plane) & (s_plane > 0)
    depth[plane_hit] = s_plane[plane_hit]
    normals[plane_hit] = (0.0, 0.0, 1.0)

    if spec.shape == "sphere_on_plane":
        r = spec.sphere_radius_mm
        if np.linalg.norm(origin) <= r:
            raise ConfigError("degenerate rig: camera is inside the sphere")
        a = np.einsum("...i,...i", dirs, dirs)
        b = 2.0 * dirs @ origin
        c = origin @ origin - r * r
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        s_sphere = (-b - sq) / (2 * a)
        hit &= s_sphere > 0
        closer = hit & (s_sphere < depth)
        depth[closer] = s_sphere[closer]
        pts = origin + dirs[closer] * s_sphere[closer][:, None]
        normals[closer] = pts / r

    hit = np.isfinite(depth)
    depth[~hit] = 0.0
    points = origin + dirs * np.where(hit, depth, 0.0)[..., None]
    return depth, points, normals, hit


def shade(points, normals, hit, spec: SceneSpec) -> np.ndarray:
    albedo = 0.5 + 0.45 * spec.texture_strength * (2.0 * value_noise(points, spec.seed) - 1.0)
    lambert = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, None)
    rgb = (albedo * lambert)[..., None] * TINT
    rgb[~hit] = 0.0
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def view_pairs(cameras: list[Camera]):
    """Rank every other view by the angle between viewing directions (smallest first)."""
    axes = [c.pose.rotation[2] for c in cameras]
    pairs = []
    for i, ai in enumerate(axes):
        row = []
        for j, aj in enumerate(axes):
            if j != i:
                cosang = float(np.clip(ai @ aj, -1.0, 1.0))
                row.append((j, round(cosang, 6)))
        row.sort(key=lambda item: (-item[1], item[0]))
        pairs.append(row)
    return pairs


def render_scene(spec: SceneSpec) -> Scene:
    provisional = rig_cameras(spec)
    renders = [cast_rays(cam, spec) for cam in provisional]
    ranges = []
    for depth, *_ in renders:
        valid = depth[depth > 0]
        if valid.size == 0:
            raise ConfigError("degenerate rig: a view sees no geometry")
        ranges.append((float(valid.min()), float(valid.max())))
    cameras = rig_cameras(spec, ranges)
    views = []
    for cam, (depth, points, normals, hit) in zip(cameras, renders):
        image = shade(points, normals, hit, spec)
        views.append(View(image, cam, gt_depth=depth.astype(np.float32)))
    return Scene(views, view_pairs(cameras))


def generate_scene(spec: SceneSpec, out_dir) -> Scene:
    """Render ``spec`` and write it to ``out_dir`` in the scene directory layout."""
    scene = render_scene(spec)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_scene(scene, out_dir)
    return scene


def analytic_surface_distance(points: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Unsigned distance from world points to the visible scene surface."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if spec.shape == "textured_plane":
        return np.abs(z)
    r = spec.sphere_radius_mm
    rho = np.hypot(points[..., 0], points[..., 1])
    rim = np.hypot(rho - r, z)
    # visible surface = upper hemisphere + plane outside the sphere's footprint
    d_hemi = np.where(z >= 0, np.abs(np.linalg.norm(points, axis=-1) - r), rim)
    d_plane = np.where(rho >= r, np.abs(z), rim)
    return np.minimum(d_hemi, d_plane)
