import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from plyfile import PlyData

from depthprior_mvs.dataio import (
    PointCloud,
    Scene,
    View,
    load_scene,
    read_cam,
    read_image,
    read_pair,
    read_pfm,
    read_ply,
    write_cam,
    write_image,
    write_pair,
    write_pfm,
    write_ply,
    write_scene,
)
from depthprior_mvs.errors import ConfigError, DimensionError, FormatError, MissingComponentError
from depthprior_mvs.geometry import Camera, CameraIntrinsics, CameraPose

from conftest import random_rotation

# --------------------------------------------------------------------- PFM


def test_pfm_roundtrip_exact_bits(tmp_path):
    buf = np.array([[1.5, 0.0], [3.25, 600.0]], dtype=np.float32)
    write_pfm(buf, tmp_path / "a.pfm")
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32
    assert back.tobytes() == buf.tobytes()


def test_pfm_layout_is_bottom_to_top_little_endian(tmp_path):
    buf = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(buf, tmp_path / "a.pfm")
    raw = (tmp_path / "a.pfm").read_bytes()
    header = b"Pf\n2 2\n-1\n"
    assert raw.startswith(header)
    assert np.frombuffer(raw[len(header):], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_big_endian_accepted(tmp_path):
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([7.0, 8.0], ">f4").tobytes())
    assert read_pfm(path).tolist() == [[7.0, 8.0]]


def test_pfm_three_channel_rejected(tmp_path):
    path = tmp_path / "rgb.pfm"
    path.write_bytes(b"PF\n1 1\n-1\n" + np.zeros(3, "<f4").tobytes())
    with pytest.raises(FormatError, match="unsupported channel count"):
        read_pfm(path)


@pytest.mark.parametrize(
    "content,offset",
    [
        (b"P5\n1 1\n-1\n" + bytes(4), 0),
        (b"Pf\n1 x\n-1\n" + bytes(4), 3),
        (b"Pf\n1 1\nnope\n" + bytes(4), 7),
        (b"Pf\n2 2\n-1\n" + bytes(4), 10),
    ],
)
def test_pfm_errors_report_byte_offset(tmp_path, content, offset):
    path = tmp_path / "bad.pfm"
    path.write_bytes(content)
    with pytest.raises(FormatError, match=f"byte offset {offset}") as info:
        read_pfm(path)
    assert info.value.offset == offset


def test_pfm_non_finite_payload(tmp_path):
    path = tmp_path / "nan.pfm"
    path.write_bytes(b"Pf\n2 1\n-1\n" + np.array([1.0, np.nan], "<f4").tobytes())
    with pytest.raises(FormatError, match="non-finite") as info:
        read_pfm(path)
    assert info.value.offset == 10 + 4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=17),
                  elements=st.floats(0, 1e6, width=32)))
def test_pfm_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(arr, path)
    assert read_pfm(path).tobytes() == np.ascontiguousarray(arr).tobytes()


# -------------------------------------------------------------------- cams


def test_cam_example(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text(
        "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\n"
        "intrinsic\n2892 0 800\n0 2892 600\n0 0 1\n\n425 2.5\n"
    )
    cam = read_cam(path)
    assert cam.intrinsics.fx == 2892 and cam.intrinsics.fy == 2892
    assert (cam.intrinsics.cx, cam.intrinsics.cy) == (800, 600)
    assert cam.depth_min == 425 and cam.depth_interval == 2.5
    assert (cam.width, cam.height) == (1600, 1200)


def test_cam_rejects_reflection(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text(
        "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 -1 0\n0 0 0 1\n\n"
        "intrinsic\n100 0 50\n0 100 50\n0 0 1\n\n425 2.5\n"
    )
    with pytest.raises(FormatError, match="determinant"):
        read_cam(path)


@pytest.mark.parametrize("drop", ["extrinsic", "intrinsic", "depth"])
def test_cam_missing_block(tmp_path, drop):
    parts = {
        "extrinsic": "extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n",
        "intrinsic": "intrinsic\n100 0 50\n0 100 50\n0 0 1\n",
        "depth": "425 2.5\n",
    }
    del parts[drop]
    path = tmp_path / "c.txt"
    path.write_text("\n".join(parts.values()))
    with pytest.raises(FormatError):
        read_cam(path)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cam_roundtrip_random(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(32, 2000)), int(rng.integers(32, 2000))
    intr = CameraIntrinsics(rng.uniform(50, 5000), rng.uniform(50, 5000), rng.uniform(0, w - 1),
                            rng.uniform(0, h - 1), w, h)
    cam = Camera(intr, CameraPose(random_rotation(rng), rng.uniform(-1000, 1000, 3)),
                 rng.uniform(1, 1000), rng.uniform(0.01, 10))
    path = tmp_path_factory.mktemp("cam") / "c.txt"
    write_cam(cam, path)
    back = read_cam(path)
    np.testing.assert_allclose(back.K, cam.K, rtol=1e-6)
    np.testing.assert_allclose(back.pose.rotation, cam.pose.rotation, atol=1e-9)
    np.testing.assert_allclose(back.pose.translation, cam.pose.translation, rtol=1e-6, atol=1e-9)
    assert back.depth_min == pytest.approx(cam.depth_min, rel=1e-6)
    assert back.depth_interval == pytest.approx(cam.depth_interval, rel=1e-6)
    assert (back.width, back.height) == (cam.width, cam.height)


def test_cam_snaps_six_digit_rotation(tmp_path):
    R = random_rotation(np.random.default_rng(5))
    rows = "\n".join(" ".join(f"{v:.6f}" for v in list(R[i]) + [0.0]) for i in range(3))
    path = tmp_path / "c.txt"
    path.write_text(f"extrinsic\n{rows}\n0 0 0 1\n\nintrinsic\n100 0 50\n0 100 50\n0 0 1\n\n425 2.5\n")
    cam = read_cam(path)
    np.testing.assert_allclose(cam.pose.rotation, R, atol=1e-5)


# ------------------------------------------------------------------- pairs


def test_pair_example(tmp_path):
    path = tmp_path / "pair.txt"
    path.write_text("3\n0\n2 1 0.9 2 0.5\n1\n1 0 0.9\n2\n1 0 0.5\n")
    pairs = read_pair(path)
    assert [s for s, _ in pairs[0]] == [1, 2]
    assert pairs[0][0][1] == pytest.approx(0.9)


def test_pair_self_reference_rejected(tmp_path):
    path = tmp_path / "pair.txt"
    path.write_text("2\n0\n1 0 1.0\n1\n1 0 1.0\n")
    with pytest.raises((FormatError, ConfigError)):
        read_pair(path)


@pytest.mark.parametrize("text", ["2\n0\n1 5 1.0\n1\n1 0 1.0\n", "2\n0\n1 1\n", "x\n"])
def test_pair_malformed(tmp_path, text):
    path = tmp_path / "pair.txt"
    path.write_text(text)
    with pytest.raises((FormatError, ConfigError)):
        read_pair(path)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 1000))
def test_pair_roundtrip_random(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        k = int(rng.integers(1, len(others) + 1))
        chosen = rng.permutation(others)[:k]
        pairs.append([(int(j), float(np.float32(rng.uniform(0, 10)))) for j in chosen])
    path = tmp_path_factory.mktemp("pair") / "pair.txt"
    write_pair(pairs, path)
    back = read_pair(path)
    assert [[s for s, _ in row] for row in back] == [[s for s, _ in row] for row in pairs]
    for row_b, row_p in zip(back, pairs):
        for (_, a), (_, b) in zip(row_b, row_p):
            assert a == pytest.approx(b, rel=1e-5)


# -------------------------------------------------------------------- PLY


def ply_header_size(path):
    raw = open(path, "rb").read()
    return raw.index(b"end_header\n") + len(b"end_header\n")


def test_ply_single_white_point_reference_parser(tmp_path):
    path = tmp_path / "one.ply"
    write_ply(PointCloud(np.zeros((1, 3))), path)
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    assert len(v) == 1
    assert (v["x"][0], v["y"][0], v["z"][0]) == (0.0, 0.0, 0.0)
    assert (v["red"][0], v["green"][0], v["blue"][0]) == (255, 255, 255)
    assert ply.text is False and ply.byte_order == "<"


def test_ply_empty(tmp_path):
    path = tmp_path / "empty.ply"
    write_ply(PointCloud(np.zeros((0, 3))), path)
    assert len(PlyData.read(str(path))["vertex"]) == 0
    assert len(read_ply(path)) == 0
    assert os.path.getsize(path) == ply_header_size(path)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 300), seed=st.integers(0, 2**32 - 1))
def test_ply_roundtrip_and_size(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1e4, 1e4, (n, 3)).astype(np.float32).astype(np.float64)
    cols = rng.integers(0, 256, (n, 3), dtype=np.uint8)
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    write_ply(PointCloud(pts, cols), path)
    assert os.path.getsize(path) == ply_header_size(path) + 15 * n
    back = read_ply(path)
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_array_equal(back.colors, cols)
    ref = PlyData.read(str(path))["vertex"]
    np.testing.assert_array_equal(np.c_[ref["x"], ref["y"], ref["z"]], pts.astype(np.float32))


def test_ply_bad_property_is_format_error(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty int128 x\nend_header\n")
    with pytest.raises(FormatError):
        read_ply(path)


def test_point_cloud_invariants():
    with pytest.raises(FormatError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))
    with pytest.raises(DimensionError):
        PointCloud(np.zeros((2, 3)), np.zeros((1, 3), np.uint8))


# ------------------------------------------------------------------ images


def test_image_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
    write_image(img, tmp_path / "i.png")
    np.testing.assert_array_equal(read_image(tmp_path / "i.png"), img)


# ------------------------------------------------------------------ scenes


def test_view_size_invariants(small_scene):
    v = small_scene.views[0]
    with pytest.raises(DimensionError):
        View(v.image[:-1], v.camera)
    with pytest.raises(DimensionError):
        View(v.image, v.camera, prior_depth=np.ones((10, 10), np.float32), prior_scale=4)
    View(v.image, v.camera, prior_depth=np.ones((16, 24), np.float32), prior_scale=4)


def test_scene_roundtrip(tmp_path, small_scene):
    write_scene(small_scene, tmp_path)
    back = load_scene(tmp_path)
    assert len(back.views) == len(small_scene.views)
    for a, b in zip(back.views, small_scene.views):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt_depth, b.gt_depth)
        np.testing.assert_allclose(a.camera.K, b.camera.K, rtol=1e-12)
        assert a.camera.depth_min == b.camera.depth_min
    assert back.pairs == [[(s, pytest.approx(sc, rel=1e-5)) for s, sc in row] for row in small_scene.pairs]


@pytest.mark.parametrize("part", ["cams", "images"])
def test_missing_scene_component(tmp_path, small_scene, part):
    write_scene(small_scene, tmp_path)
    for f in (tmp_path / part).iterdir():
        f.unlink()
    (tmp_path / part).rmdir()
    with pytest.raises(MissingComponentError, match="missing component"):
        load_scene(tmp_path)


def test_missing_pair_file_explains_fix(tmp_path, small_scene):
    write_scene(small_scene, tmp_path)
    (tmp_path / "pair.txt").unlink()
    with pytest.raises(MissingComponentError, match="synth-scene"):
        load_scene(tmp_path)


def test_scene_rejects_self_pair(small_scene):
    with pytest.raises((ConfigError, FormatError)):
        Scene(small_scene.views, [[(0, 1.0)]] + small_scene.pairs[1:])
