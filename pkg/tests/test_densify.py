import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthprior_mvs.densify import PropagationParams, expand_sparse, propagate
from depthprior_mvs.errors import ConfigError, DimensionError


def oracle(sparse, guide, window=3, sc=0.1, ss=1.5):
    """Direct per-pixel weighted average over the valid window neighbours."""
    H, W = sparse.shape
    r = window // 2
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            num = den = 0.0
            for qy in range(max(0, y - r), min(H, y + r + 1)):
                for qx in range(max(0, x - r), min(W, x + r + 1)):
                    if sparse[qy, qx] <= 0:
                        continue
                    w = np.exp(-((guide[y, x] - guide[qy, qx]) ** 2) / (2 * sc * sc))
                    w *= np.exp(-((qy - y) ** 2 + (qx - x) ** 2) / (2 * ss * ss))
                    num += w * sparse[qy, qx]
                    den += w
            out[y, x] = num / den if den > 0 else 0.0
    return out


def test_constant_depth_fills_holes_exactly(rng):
    sparse = np.zeros((9, 11), np.float32)
    sparse[::2, ::2] = 800.0
    out = propagate(sparse, rng.random((9, 11)))
    assert np.all(out == np.float32(800.0))


def test_single_valid_neighbour_is_copied():
    sparse = np.zeros((3, 3), np.float32)
    sparse[0, 0] = 640.0
    out = propagate(sparse, np.zeros((3, 3)))
    assert out[1, 1] == 640.0 and out[0, 1] == 640.0
    assert out[2, 2] == 0.0  # no valid pixel in its window


def test_matches_direct_oracle(rng):
    sparse = rng.uniform(500, 900, (10, 12))
    sparse[rng.random(sparse.shape) < 0.6] = 0
    guide = rng.random((10, 12))
    np.testing.assert_allclose(propagate(sparse, guide), oracle(sparse, guide), rtol=1e-6)


def test_checkerboard_with_window_five(rng):
    sparse = np.where((np.indices((8, 8)).sum(0) % 2) == 0, rng.uniform(300, 700, (8, 8)), 0.0)
    guide = rng.random((8, 8))
    params = PropagationParams(window=5, sigma_color=0.3, sigma_spatial=2.0)
    np.testing.assert_allclose(propagate(sparse, guide, params), oracle(sparse, guide, 5, 0.3, 2.0), rtol=1e-6)


def test_large_color_sigma_reduces_to_spatial_filter(rng):
    sparse = rng.uniform(500, 900, (7, 9))
    sparse[rng.random(sparse.shape) < 0.5] = 0
    guide = rng.random((7, 9))
    wide = propagate(sparse, guide, PropagationParams(sigma_color=1e9))
    spatial_only = oracle(sparse, np.zeros_like(guide))
    np.testing.assert_allclose(wide, spatial_only, rtol=1e-6)


def test_edge_preserving():
    # two depth layers separated by an intensity edge stay apart
    guide = np.zeros((6, 8))
    guide[:, 4:] = 1.0
    sparse = np.where(guide > 0, 1200.0, 600.0)
    sparse[:, 3] = 0
    out = propagate(sparse, guide)
    assert np.abs(out[:, 3] - 600.0).max() < 1e-3


def test_second_pass_changes_less(rng):
    sparse = rng.uniform(500, 900, (16, 16)).astype(np.float32)
    sparse[rng.random(sparse.shape) < 0.5] = 0
    guide = rng.random((16, 16))
    once = propagate(sparse, guide)
    twice = propagate(once, guide)
    filled = sparse > 0
    assert np.abs(twice - once)[filled].sum() < np.abs(once - sparse)[filled].sum()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), window=st.sampled_from([3, 5, 7]))
def test_output_is_convex_combination(seed, window):
    rng = np.random.default_rng(seed)
    sparse = rng.uniform(100, 2000, (8, 9)).astype(np.float32)
    sparse[rng.random(sparse.shape) < rng.uniform(0, 0.9)] = 0
    out = propagate(sparse, rng.random((8, 9)), PropagationParams(window=window))
    r = window // 2
    pad = np.pad(sparse, r)
    for y in range(8):
        for x in range(9):
            vals = pad[y:y + window, x:x + window]
            vals = vals[vals > 0]
            if vals.size == 0:
                assert out[y, x] == 0
            else:
                assert vals.min() * (1 - 1e-6) <= out[y, x] <= vals.max() * (1 + 1e-6)


def test_uint8_guide_is_converted_to_gray():
    sparse = np.zeros((4, 4), np.float32)
    sparse[0, 0], sparse[0, 1] = 500.0, 900.0
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[:, 1] = 255
    out = propagate(sparse, rgb)
    assert abs(out[1, 0] - 500.0) < 1.0  # the bright neighbour is downweighted


@pytest.mark.parametrize("kwargs", [dict(window=4), dict(window=1), dict(sigma_color=0), dict(sigma_spatial=-1)])
def test_params_invariants(kwargs):
    with pytest.raises(ConfigError):
        PropagationParams(**kwargs)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        propagate(np.ones((4, 4), np.float32), np.ones((4, 5)))


def test_expand_sparse():
    out = expand_sparse(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32), 2, (4, 3))
    assert out.tolist() == [[1, 0, 2], [0, 0, 0], [3, 0, 4], [0, 0, 0]]
    with pytest.raises(DimensionError):
        expand_sparse(np.ones((3, 3), np.float32), 2, (4, 4))
