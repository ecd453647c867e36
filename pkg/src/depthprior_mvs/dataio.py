"""Scene data and file formats.

Depth maps are plain ``float32`` arrays of shape ``(H, W)`` in millimetres with
``0.0`` meaning "missing"; they are stored as single-channel PFM. Cameras use
the MVSNet text convention, view pairing lives in ``pair.txt``, and point
clouds are written as binary little-endian PLY.

A scene directory looks like::

    scene/
      images/00000000.png ...
      cams/00000000_cam.txt ...
      depths_gt/00000000.pfm ...      (optional)
      depths_prior/00000000.pfm ...   (optional, may be lower resolution)
      pair.txt
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError, FormatError, MissingComponentError
from .geometry import Camera, CameraIntrinsics, CameraPose, check_rotation

# Fixed luma weights; matching costs depend on them, so they never change.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

CAM_ROTATION_TOL = 1e-3


def check_depth(depth: np.ndarray, name: str = "depth") -> np.ndarray:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise FormatError(f"{name} contains non-finite values")
    if np.any(depth < 0):
        raise FormatError(f"{name} contains negative values")
    return depth.astype(np.float32, copy=False)


def to_gray(image: np.ndarray) -> np.ndarray:
    """8-bit RGB (H, W, 3) -> float32 intensity in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 2:
        return (image.astype(np.float64) / 255.0).astype(np.float32)
    w = np.asarray(GRAY_WEIGHTS)
    return ((image[..., :3].astype(np.float64) @ w) / 255.0).astype(np.float32)


@dataclass(eq=False)
class View:
    """One posed image with optional depth maps.

    ``gt_scale``/``prior_scale`` record the integer factor by which an attached
    depth map is smaller than the image; nothing is ever resampled implicitly.
    """

    image: np.ndarray
    camera: Camera
    gt_depth: np.ndarray | None = None
    prior_depth: np.ndarray | None = None
    gt_scale: int = 1
    prior_scale: int = 1

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (w, h) != (self.camera.width, self.camera.height):
            raise DimensionError(
                f"image is {w}x{h} but camera intrinsics say {self.camera.width}x{self.camera.height}"
            )
        for name in ("gt", "prior"):
            depth = getattr(self, f"{name}_depth")
            if depth is None:
                continue
            scale = getattr(self, f"{name}_scale")
            if depth.shape != (h // scale, w // scale) or w % scale or h % scale:
                raise DimensionError(
                    f"{name} depth {depth.shape[1]}x{depth.shape[0]} does not match image "
                    f"{w}x{h} at scale {scale}"
                )

    @property
    def gray(self) -> np.ndarray:
        return to_gray(self.image)


@dataclass(eq=False)
class Scene:
    views: list[View]
    # pairs[i] is the ordered list of (source_id, score) for view i
    pairs: list[list[tuple[int, float]]] = field(default_factory=list)

    def __post_init__(self):
        if self.pairs:
            validate_pairs(self.pairs, len(self.views))

    def sources(self, ref_id: int) -> list[int]:
        return [s for s, _ in self.pairs[ref_id]]

    def with_pairs(self, pairs) -> Scene:
        return replace(self, pairs=pairs)


def validate_pairs(pairs, n_views: int) -> None:
    if len(pairs) != n_views:
        raise FormatError(f"pair table lists {len(pairs)} views, scene has {n_views}")
    for ref, row in enumerate(pairs):
        for src, _ in row:
            if not 0 <= src < n_views:
                raise FormatError(f"view {ref}: source index {src} out of range")
            if src == ref:
                raise FormatError(f"view {ref} lists itself as a source")


# --------------------------------------------------------------------------- PFM


def write_pfm(buffer: np.ndarray, path) -> None:
    data = np.asarray(buffer, dtype=np.float32)
    if data.ndim != 2:
        raise DimensionError(f"PFM writer expects a 2-D array, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise FormatError("refusing to write non-finite values to PFM")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def _read_header_line(f, offset: int) -> tuple[str, int]:
    line = f.readline(256)
    if not line.endswith(b"\n"):
        raise FormatError("truncated or overlong PFM header line", offset)
    try:
        return line.decode("ascii").strip(), offset + len(line)
    except UnicodeDecodeError:
        raise FormatError("non-ASCII PFM header", offset) from None


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, offset = _read_header_line(f, 0)
        if magic == "PF":
            raise FormatError("unsupported channel count: 3-channel PFM ('PF')", 0)
        if magic != "Pf":
            raise FormatError(f"bad PFM magic {magic!r}", 0)
        dims, next_offset = _read_header_line(f, offset)
        try:
            w, h = (int(x) for x in dims.split())
        except ValueError:
            raise FormatError(f"bad PFM dimensions line {dims!r}", offset) from None
        if w <= 0 or h <= 0:
            raise FormatError(f"non-positive PFM dimensions {w}x{h}", offset)
        offset = next_offset
        scale_line, next_offset = _read_header_line(f, offset)
        try:
            scale = float(scale_line)
        except ValueError:
            raise FormatError(f"bad PFM scale line {scale_line!r}", offset) from None
        if scale == 0 or not np.isfinite(scale):
            raise FormatError(f"invalid PFM scale {scale_line!r}", offset)
        offset = next_offset
        payload = f.read()
    expected = w * h * 4
    if len(payload) != expected:
        raise FormatError(
            f"PFM payload is {len(payload)} bytes, expected {expected} for {w}x{h}", offset
        )
    data = np.frombuffer(payload, dtype="<f4" if scale < 0 else ">f4").reshape(h, w)
    bad = ~np.isfinite(data)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError("non-finite value in PFM payload", offset + 4 * first)
    return np.flipud(data).astype(np.float32)


# ------------------------------------------------------------------------ cams


def write_cam(camera: Camera, path) -> None:
    E = camera.pose.matrix
    K = camera.K
    lines = ["extrinsic"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in E]
    lines += ["", "intrinsic"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in K]
    lines += ["", f"{camera.depth_min:.17g} {camera.depth_interval:.17g}"]
    lines += ["", "image_size", f"{camera.width} {camera.height}"]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_matrix(lines, start, rows, cols, what, path):
    try:
        mat = np.array([[float(x) for x in lines[start + i].split()] for i in range(rows)])
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed {what} block") from None
    if mat.shape != (rows, cols):
        raise FormatError(f"{path}: {what} block must be {rows}x{cols}")
    return mat


def read_cam(path, image_size: tuple[int, int] | None = None) -> Camera:
    """Read an MVSNet-style camera file.

    Image size is taken from ``image_size`` when given, else from the optional
    ``image_size`` block, else inferred as twice the principal point.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    try:
        i_ext = lines.index("extrinsic")
    except ValueError:
        raise FormatError(f"{path}: missing 'extrinsic' block") from None
    try:
        i_int = lines.index("intrinsic")
    except ValueError:
        raise FormatError(f"{path}: missing 'intrinsic' block") from None
    E = _parse_matrix(lines, i_ext + 1, 4, 4, "extrinsic", path)
    K = _parse_matrix(lines, i_int + 1, 3, 3, "intrinsic", path)
    try:
        depth_vals = [float(x) for x in lines[i_int + 4].split()]
        depth_min, depth_interval = depth_vals[0], depth_vals[1]
    except (IndexError, ValueError):
        raise FormatError(f"{path}: missing 'depth_min depth_interval' line") from None

    R = E[:3, :3]
    try:
        check_rotation(R, CAM_ROTATION_TOL)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-12:
        # snap text-rounded rotations back onto SO(3)
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
    if image_size is None and "image_size" in lines:
        i_sz = lines.index("image_size")
        try:
            image_size = tuple(int(x) for x in lines[i_sz + 1].split())
        except (IndexError, ValueError):
            raise FormatError(f"{path}: malformed image_size block") from None
    if image_size is None:
        image_size = (max(1, int(np.ceil(2 * K[0, 2]))), max(1, int(np.ceil(2 * K[1, 2]))))
    width, height = image_size
    try:
        intr = CameraIntrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(width), int(height))
        return Camera(intr, CameraPose(R, E[:3, 3]), depth_min, depth_interval)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ------------------------------------------------------------------------ pairs


def write_pair(pairs, path) -> None:
    lines = [str(len(pairs))]
    for ref, row in enumerate(pairs):
        lines.append(str(ref))
        lines.append(" ".join([str(len(row))] + [f"{s} {score:.6g}" for s, score in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pair(path) -> list[list[tuple[int, float]]]:
    tokens = Path(path).read_text().split()
    pos = 0

    def take(cast, what):
        nonlocal pos
        if pos >= len(tokens):
            raise FormatError(f"{path}: unexpected end of file reading {what}")
        try:
            val = cast(tokens[pos])
        except ValueError:
            raise FormatError(f"{path}: bad {what} {tokens[pos]!r}") from None
        pos += 1
        return val

    n = take(int, "view count")
    pairs: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    seen = set()
    for _ in range(n):
        ref = take(int, "view id")
        if not 0 <= ref < n or ref in seen:
            raise FormatError(f"{path}: bad or duplicate view id {ref}")
        seen.add(ref)
        count = take(int, "source count")
        pairs[ref] = [(take(int, "source id"), take(float, "score")) for _ in range(count)]
    validate_pairs(pairs, n)
    return pairs


# ----------------------------------------------------------------------- images


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def downsample_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-average an RGB image (0..255 scale); returns float32, unrounded."""
    img = np.asarray(image, dtype=np.float64)
    if factor == 1:
        return img.astype(np.float32)
    h, w = img.shape[0] // factor, img.shape[1] // factor
    img = img[: h * factor, : w * factor]
    return img.reshape(h, factor, w, factor, -1).mean(axis=(1, 3)).astype(np.float32)


# ------------------------------------------------------------------------- PLY


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) mm
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise FormatError("point cloud has non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise DimensionError("colors must be 1:1 with points")

    def __len__(self):
        return len(self.points)


_PLY_VERTEX = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8", "uchar": "u1", "uint8": "u1"}


def write_ply(cloud: PointCloud, path) -> None:
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    data = np.empty(n, dtype=_PLY_VERTEX)
    data["x"], data["y"], data["z"] = cloud.points.T.astype(np.float32)
    colors = cloud.colors if cloud.colors is not None else np.full((n, 3), 255, np.uint8)
    data["red"], data["green"], data["blue"] = colors.T
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path) -> PointCloud:
    """Read the binary little-endian x/y/z(+rgb) vertex PLY this package writes."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file", 0)
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    n = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["element"]:
            raise FormatError(f"{path}: unsupported element {parts[1]!r}")
        elif parts[:1] == ["property"]:
            kind = _PLY_TYPES.get(parts[1]) if len(parts) == 3 else None
            if kind is None:
                raise FormatError(f"{path}: unsupported property line {line!r}")
            props.append((parts[2], kind))
    if n is None:
        raise FormatError(f"{path}: no vertex element")
    dtype = np.dtype(props)
    body = raw[end + len(b"end_header\n") :]
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"{path}: vertex payload size mismatch", end + 11)
    data = np.frombuffer(body, dtype=dtype)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= set(dtype.names):
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1)
    return PointCloud(points, colors)


# ----------------------------------------------------------------------- scenes

_ID = re.compile(r"^(\d+)")


def view_filename(view_id: int, suffix: str) -> str:
    return f"{view_id:08d}{suffix}"


def _numbered(directory: Path, pattern: str) -> dict[int, Path]:
    out = {}
    for p in directory.glob(pattern):
        m = _ID.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def _depth_scale(depth: np.ndarray, image_shape, path) -> int:
    h, w = image_shape[:2]
    dh, dw = depth.shape
    if h % dh or w % dw or h // dh != w // dw:
        raise DimensionError(f"{path}: depth {dw}x{dh} is not an integer divisor of image {w}x{h}")
    return h // dh


def load_scene(directory) -> Scene:
    directory = Path(directory)
    for part in ("images", "cams"):
        if not (directory / part).is_dir():
            raise MissingComponentError(f"{directory}: missing component '{part}/'")
    if not (directory / "pair.txt").is_file():
        raise MissingComponentError(
            f"{directory}: missing component 'pair.txt' "
            "(generate the scene with `depthprior-mvs synth-scene` or supply a pairing file)"
        )
    images = _numbered(directory / "images", "*.png")
    if not images:
        raise MissingComponentError(f"{directory}: images/ contains no PNG files")
    ids = sorted(images)
    if ids != list(range(len(ids))):
        raise FormatError(f"{directory}: image ids must be 0..N-1, got {ids[:5]}...")
    cams = _numbered(directory / "cams", "*_cam.txt")
    gts = _numbered(directory / "depths_gt", "*.pfm") if (directory / "depths_gt").is_dir() else {}
    priors = (
        _numbered(directory / "depths_prior", "*.pfm")
        if (directory / "depths_prior").is_dir()
        else {}
    )
    views = []
    for i in ids:
        if i not in cams:
            raise MissingComponentError(f"{directory}: missing component 'cams/' entry for view {i}")
        image = read_image(images[i])
        camera = read_cam(cams[i], image_size=(image.shape[1], image.shape[0]))
        kwargs = {}
        if i in gts:
            gt = check_depth(read_pfm(gts[i]), str(gts[i]))
            kwargs.update(gt_depth=gt, gt_scale=_depth_scale(gt, image.shape, gts[i]))
        if i in priors:
            prior = check_depth(read_pfm(priors[i]), str(priors[i]))
            kwargs.update(prior_depth=prior, prior_scale=_depth_scale(prior, image.shape, priors[i]))
        views.append(View(image, camera, **kwargs))
    pairs = read_pair(directory / "pair.txt")
    if len(pairs) != len(views):
        raise FormatError(f"pair.txt lists {len(pairs)} views, scene has {len(views)}")
    return Scene(views, pairs)


def write_scene(scene: Scene, directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "cams").mkdir(exist_ok=True)
    for i, view in enumerate(scene.views):
        write_image(view.image, directory / "images" / view_filename(i, ".png"))
        write_cam(view.camera, directory / "cams" / view_filename(i, "_cam.txt"))
        if view.gt_depth is not None:
            (directory / "depths_gt").mkdir(exist_ok=True)
            write_pfm(view.gt_depth, directory / "depths_gt" / view_filename(i, ".pfm"))
        if view.prior_depth is not None:
            (directory / "depths_prior").mkdir(exist_ok=True)
            write_pfm(view.prior_depth, directory / "depths_prior" / view_filename(i, ".pfm"))
    write_pair(scene.pairs, directory / "pair.txt")


def require_gt(scene: Scene) -> None:
    if any(v.gt_depth is None for v in scene.views):
        raise MissingComponentError("scene is missing component 'depths_gt/'")


def require_prior(scene: Scene) -> None:
    if any(v.prior_depth is None for v in scene.views):
        raise ConfigError("prior mode requires depths_prior/ for every view, but the scene has none")
