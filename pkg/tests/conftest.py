import numpy as np
import pytest

from depthprior_mvs.geometry import Camera, CameraIntrinsics, CameraPose, look_at
from depthprior_mvs.synthscene import SceneSpec, render_scene


def simple_camera(f=100.0, cx=50.0, cy=50.0, width=100, height=100, pose=None, depth_min=400.0, interval=2.0):
    return Camera(CameraIntrinsics(f, f, cx, cy, width, height), pose or CameraPose.identity(), depth_min, interval)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def camera_near(rng, target=(0.0, 0.0, 0.0), distance=1000.0, spread=300.0, width=160, height=128):
    center = np.array(target) + np.array([*rng.uniform(-spread, spread, 2), distance])
    f = rng.uniform(150, 400)
    intr = CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-5, 5),
                            height / 2 + rng.uniform(-5, 5), width, height)
    return Camera(intr, look_at(center, target), 500.0, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plane_scene():
    """Default 5-view 160x128 textured plane."""
    return render_scene(SceneSpec())


@pytest.fixture(scope="session")
def small_scene():
    return render_scene(SceneSpec(n_views=4, image_size=(96, 64)))


@pytest.fixture(scope="session")
def sphere_scene():
    spec = SceneSpec(shape="sphere_on_plane")
    return spec, render_scene(spec)
