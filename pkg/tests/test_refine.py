import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthprior_mvs.errors import ConfigError, DimensionError
from depthprior_mvs.geometry import Camera, CameraPose
from depthprior_mvs.matcher import extract_features
from depthprior_mvs.refine import GNParams, gauss_newton, scalar_gn_step
from depthprior_mvs.synthscene import SceneSpec, render_scene


def test_scalar_step_example():
    # r(d) = 2d - 10 at d = 0: J = 2, r = -10, step = 5 lands on the root
    assert scalar_gn_step([-10.0], [2.0]) == pytest.approx(5.0)


def test_scalar_step_zero_jacobian():
    assert scalar_gn_step([1.0, 2.0], [0.0, 0.0]) == 0.0


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.1, 10.0), b=st.floats(-100.0, 100.0), d=st.floats(-50.0, 50.0))
def test_scalar_step_solves_linear_residuals(a, b, d):
    step = scalar_gn_step([a * d + b], [a])
    assert a * (d + step) + b == pytest.approx(0.0, abs=1e-9 * max(1.0, abs(b), abs(a * d)))


def setup(scene, ref_id=0, sources=None):
    ref = scene.views[ref_id]
    ids = scene.sources(ref_id) if sources is None else sources
    return (ref, extract_features(ref.image), [extract_features(scene.views[i].image) for i in ids],
            (ref.camera, [scene.views[i].camera for i in ids]))


def interior(shape, margin=8):
    m = np.zeros(shape, bool)
    m[margin:-margin, margin:-margin] = True
    return m


@pytest.fixture(scope="module")
def resolved_scene():
    # 320x256 puts about two pixels on the finest texture octave, so bilinear
    # sampling of the sources is close to exact
    return render_scene(SceneSpec(texture_strength=0.5, image_size=(320, 256), n_views=3))


def test_ground_truth_is_a_fixed_point(resolved_scene):
    ref, rf, sf, cams = setup(resolved_scene)
    step = gauss_newton(ref.gt_depth, rf, sf, cams, GNParams(max_iters=1))
    mask = interior(ref.gt_depth.shape) & (step.active_sources > 0)
    assert mask.sum() > 0.5 * mask.size
    unit = ref.camera.depth_interval
    delta = np.abs(step.depth.astype(np.float64) - ref.gt_depth)[mask]
    assert (delta < 0.1 * unit).mean() >= 0.99
    full = gauss_newton(ref.gt_depth, rf, sf, cams)
    drift = np.abs(full.depth.astype(np.float64) - ref.gt_depth)[mask]
    assert np.median(drift) < 0.1 * unit


def test_perturbed_depth_moves_toward_truth(plane_scene):
    ref, rf, sf, cams = setup(plane_scene)
    rng = np.random.default_rng(0)
    start = ref.gt_depth + rng.choice([-0.5, 0.5], ref.gt_depth.shape) * ref.camera.depth_interval
    res = gauss_newton(start.astype(np.float32), rf, sf, cams)
    mask = interior(start.shape) & (res.active_sources > 0)
    before = np.abs(start - ref.gt_depth)[mask]
    after = np.abs(res.depth - ref.gt_depth)[mask]
    assert np.median(after) < 0.5 * np.median(before)


def test_accepted_steps_never_increase_error(plane_scene):
    ref, rf, sf, cams = setup(plane_scene)
    rng = np.random.default_rng(1)
    start = ref.gt_depth * rng.uniform(0.97, 1.03, ref.gt_depth.shape)
    res = gauss_newton(start.astype(np.float32), rf, sf, cams, GNParams(max_iters=5))
    ev = np.isfinite(res.initial_error)
    assert ev.sum() > 0.5 * ev.size
    assert np.all(res.final_error[ev] <= res.initial_error[ev])
    moved = res.depth != start.astype(np.float32)
    assert np.all(res.final_error[moved & ev] < res.initial_error[moved & ev])


def test_textureless_reference_keeps_depth(plane_scene):
    ref = plane_scene.views[0]
    flat = extract_features(np.full(ref.image.shape, 128, np.uint8))
    srcs = [flat] * 2
    cams = (ref.camera, [plane_scene.views[i].camera for i in (1, 2)])
    res = gauss_newton(ref.gt_depth, flat, srcs, cams)
    assert np.array_equal(res.depth, ref.gt_depth)


def test_source_order_does_not_change_result(plane_scene):
    ref, rf, sf, (rc, sc) = setup(plane_scene)
    start = (ref.gt_depth * 1.01).astype(np.float32)
    a = gauss_newton(start, rf, sf, (rc, sc))
    b = gauss_newton(start, rf, sf[::-1], (rc, sc[::-1]))
    np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)


def test_pixels_without_visible_source_are_untouched(plane_scene):
    ref, rf, _, _ = setup(plane_scene)
    cam = ref.camera
    # a source looking the other way sees nothing of the reference frustum
    R = np.diag([1.0, -1.0, -1.0]) @ cam.pose.rotation
    away = Camera(cam.intrinsics, CameraPose(R, -R @ cam.pose.center), cam.depth_min, cam.depth_interval)
    res = gauss_newton(ref.gt_depth * 1.02, rf, [rf], (cam, [away]))
    assert np.array_equal(res.depth, (ref.gt_depth * 1.02).astype(np.float32))
    assert np.all(res.active_sources == 0)
    assert np.all(np.isnan(res.final_error))


def test_missing_depth_stays_missing(plane_scene):
    ref, rf, sf, cams = setup(plane_scene)
    start = ref.gt_depth.copy()
    start[10:20, 10:20] = 0
    res = gauss_newton(start, rf, sf, cams)
    assert np.all(res.depth[10:20, 10:20] == 0)


def test_min_valid_sources_gate(plane_scene):
    ref, rf, sf, cams = setup(plane_scene)
    start = (ref.gt_depth * 1.01).astype(np.float32)
    res = gauss_newton(start, rf, sf, cams, GNParams(min_valid_sources=len(sf) + 1))
    assert np.array_equal(res.depth, start)


def test_step_clamp_bounds_total_change(plane_scene):
    ref, rf, sf, cams = setup(plane_scene)
    start = (ref.gt_depth * 1.05).astype(np.float32)
    p = GNParams(max_iters=2, step_clamp=0.25)
    res = gauss_newton(start, rf, sf, cams, p)
    bound = p.max_iters * p.step_clamp * ref.camera.depth_interval
    ulp = np.spacing(start.max())  # float32 output rounding
    assert np.abs(res.depth.astype(np.float64) - start).max() <= bound + ulp


@pytest.mark.parametrize("kwargs", [dict(max_iters=0), dict(damping=-1), dict(step_clamp=0), dict(min_valid_sources=0)])
def test_params_invariants(kwargs):
    with pytest.raises(ConfigError):
        GNParams(**kwargs)


def test_argument_errors(plane_scene):
    ref, rf, sf, (rc, sc) = setup(plane_scene)
    with pytest.raises(ConfigError):
        gauss_newton(ref.gt_depth, rf, [], (rc, []))
    with pytest.raises(ConfigError):
        gauss_newton(ref.gt_depth, rf, sf, (rc, sc[:1]))
    with pytest.raises(DimensionError):
        gauss_newton(ref.gt_depth[:-1], rf, sf, (rc, sc))
