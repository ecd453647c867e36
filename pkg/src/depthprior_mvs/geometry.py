"""Pinhole camera model: projection, back-projection and cross-view reprojection.

Conventions used everywhere in the package:

* depth is the camera-frame z coordinate (not the ray length), in millimetres;
* pixel centres sit at integer coordinates, origin at the top-left corner, so
  the image spans ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``;
* poses map world to camera: ``X_cam = R @ X_world + t``;
* no lens distortion.

All functions broadcast over leading dimensions: a ``(..., 3)`` array of points
or ``(..., 2)`` array of pixels is accepted wherever a single vector is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, ConfigError, InvalidDepthError

ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def scaled(self, factor: int) -> CameraIntrinsics:
        """Intrinsics of the image box-downsampled by an integer ``factor``.

        Pixel ``x`` of the small image covers full-resolution pixels
        ``factor*x .. factor*x + factor - 1``, so its centre maps to
        ``factor*x + (factor - 1)/2``.
        """
        if factor == 1:
            return self
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R, ROTATION_TOL)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def check_rotation(R: np.ndarray, tol: float) -> None:
    if not np.all(np.isfinite(R)):
        raise ConfigError("rotation contains non-finite entries")
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol:
        raise ConfigError(f"rotation is not orthonormal (max deviation {err:.3g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise ConfigError(f"rotation determinant is {det:.6g}, expected +1")


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth_min: float
    depth_interval: float

    def __post_init__(self):
        if not self.depth_min > 0:
            raise ConfigError(f"depth_min must be positive, got {self.depth_min}")
        if not self.depth_interval > 0:
            raise ConfigError(f"depth_interval must be positive, got {self.depth_interval}")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    def scaled(self, factor: int) -> Camera:
        if factor == 1:
            return self
        return Camera(self.intrinsics.scaled(factor), self.pose, self.depth_min, self.depth_interval)

    def in_bounds(self, pixel: np.ndarray) -> np.ndarray:
        """True where a pixel lies inside the convex hull of pixel centres."""
        pixel = np.asarray(pixel, dtype=np.float64)
        u, v = pixel[..., 0], pixel[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


def project(camera: Camera, point) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to ``(pixel, depth)``.

    Raises :class:`BehindCameraError` if any point has camera-frame z <= 0.
    """
    point = np.asarray(point, dtype=np.float64)
    pc = point @ camera.pose.rotation.T + camera.pose.translation
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is behind the camera (camera-frame z <= 0)")
    intr = camera.intrinsics
    u = intr.fx * pc[..., 0] / z + intr.cx
    v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def backproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixels with camera-frame depth to world points."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("depth must be positive")
    intr = camera.intrinsics
    x = (pixel[..., 0] - intr.cx) / intr.fx * depth
    y = (pixel[..., 1] - intr.cy) / intr.fy * depth
    pc = np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)
    return (pc - camera.pose.translation) @ camera.pose.rotation


class Reprojection(NamedTuple):
    pixel: np.ndarray
    depth: np.ndarray
    in_bounds: np.ndarray


def reproject(ref: Camera, src: Camera, pixel, depth) -> Reprojection:
    """Map reference pixels at the given depths into the source view.

    Out-of-bounds landings are flagged in ``in_bounds`` rather than raised;
    points behind the source camera raise :class:`BehindCameraError`.
    """
    world = backproject(ref, pixel, depth)
    src_pixel, src_depth = project(src, world)
    return Reprojection(src_pixel, src_depth, src.in_bounds(src_pixel))


def plane_sweep_terms(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(M, b)`` such that the source homogeneous pixel of reference
    pixel ``q`` at depth ``d`` is ``M @ [qx, qy, 1] * d + b``.

    This is the fronto-parallel plane-sweep warp written in a form that makes
    the depth dependence explicit; warping kernels and the refinement Jacobian
    are built on it.
    """
    R_rel = src.pose.rotation @ ref.pose.rotation.T
    t_rel = src.pose.translation - R_rel @ ref.pose.translation
    M = src.K @ R_rel @ np.linalg.inv(ref.K)
    b = src.K @ t_rel
    return M, b


def reproject_jacobian(ref: Camera, src: Camera, pixel, depth) -> np.ndarray:
    """Analytic derivative of the reprojected source pixel with respect to the
    reference depth, shape ``(..., 2)`` in px/mm."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    M, b = plane_sweep_terms(ref, src)
    q = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    a = q @ M.T
    h = a * depth[..., None] + b
    if np.any(h[..., 2] <= 0):
        raise BehindCameraError("point is behind the source camera")
    du = (a[..., 0] * h[..., 2] - h[..., 0] * a[..., 2]) / h[..., 2] ** 2
    dv = (a[..., 1] * h[..., 2] - h[..., 1] * a[..., 2]) / h[..., 2] ** 2
    return np.stack([du, dv], axis=-1)


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``.

    ``up`` is only used to fix the roll; camera x = up x forward.
    """
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    x = np.cross(np.asarray(up, dtype=np.float64), forward)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ConfigError("look_at: up vector is parallel to the viewing direction")
    x /= n
    y = np.cross(forward, x)
    R = np.stack([x, y, forward])
    return CameraPose(R, -R @ center)
