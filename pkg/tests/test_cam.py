import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cilcodec.cam import (
    CAM_THRESHOLD,
    ActivationMap,
    BinaryMask,
    BoundingBox,
    cam_from_features,
    composite,
    compute_cam,
    mask_from_cam,
    mask_to_bbox,
)
from cilcodec.errors import EmptyForeground, UnsupportedArchitecture
from cilcodec.trainer import ClassifierModel


def bilinear_oracle(grid, out_h, out_w):
    """Half-pixel-centred bilinear resize written out per output pixel."""
    h, w = len(grid), len(grid[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        sy = max(0.0, (i + 0.5) * h / out_h - 0.5)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for j in range(out_w):
            sx = max(0.0, (j + 0.5) * w / out_w - 0.5)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            top = grid[y0][x0] * (1 - wx) + grid[y0][x1] * wx
            bot = grid[y1][x0] * (1 - wx) + grid[y1][x1] * wx
            out[i][j] = top * (1 - wy) + bot * wy
    return out


def mask_oracle(values, threshold, out_h, out_w):
    flat = [v for row in values for v in row]
    lo, hi = min(flat), max(flat)
    norm = [[(v - lo) / (hi - lo) for v in row] for row in values]
    up = bilinear_oracle(norm, out_h, out_w)
    return [[1 if up[i][j] > threshold else 0 for j in range(out_w)] for i in range(out_h)]


@pytest.fixture
def classifier():
    torch.manual_seed(0)
    return ClassifierModel([3, 7, 1], width=8)


def _image(seed=0, size=32):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


# -- compute_cam -------------------------------------------------------------


def test_zero_head_gives_zero_map(classifier):
    with torch.no_grad():
        classifier.head.weight.zero_()
    cam = compute_cam(classifier, _image(), 1)
    assert cam.values.shape == (8, 8)
    assert np.all(cam.values == 0)


def test_two_channel_hand_evaluation():
    features = np.stack([np.ones((4, 4)), 2 * np.ones((4, 4))])
    cam = cam_from_features(features, np.array([[3.0, -1.0]]), 0)
    assert np.array_equal(cam.values, np.ones((4, 4)))


def test_doubling_weights_doubles_map(classifier):
    a = compute_cam(classifier, _image(1), 2)
    with torch.no_grad():
        classifier.head.weight.mul_(2)
    b = compute_cam(classifier, _image(1), 2)
    np.testing.assert_allclose(b.values, 2 * a.values, rtol=1e-12)


def test_map_matches_feature_resolution(classifier):
    x = torch.from_numpy(_image(2).transpose(2, 0, 1)[None].astype(np.float32) / 255)
    fmap = classifier.feature_maps(x)
    assert compute_cam(classifier, _image(2), 0).values.shape == tuple(fmap.shape[-2:])


def test_unsupported_architecture():
    with pytest.raises(UnsupportedArchitecture):
        compute_cam(torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3)), _image(), 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3, 3), elements=st.floats(-4, 4)),
       arrays(np.float64, (2, 5), elements=st.floats(-4, 4)),
       arrays(np.float64, (2, 5), elements=st.floats(-4, 4)))
def test_cam_superposition(features, w1, w2):
    a = cam_from_features(features, w1, 1).values
    b = cam_from_features(features, w2, 1).values
    c = cam_from_features(features, w1 + w2, 1).values
    np.testing.assert_allclose(c, a + b, atol=1e-9)


# -- mask_from_cam -----------------------------------------------------------


def test_default_threshold():
    assert CAM_THRESHOLD == 0.6


def test_constant_cam_gives_empty_mask():
    m = mask_from_cam(ActivationMap(np.full((8, 8), 3.5), 0), 0.6, (32, 32))
    assert m.values.shape == (32, 32) and not m.values.any()


def test_single_peak_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    values = rng.uniform(0, 1, (8, 8))
    values[3, 5] = 5.0
    m = mask_from_cam(ActivationMap(values, 0), 0.6, (32, 32))
    expected = mask_oracle(values.tolist(), 0.6, 32, 32)
    for i in range(32):
        for j in range(32):
            assert m.values[i, j] == expected[i][j], (i, j)
    assert m.values.any()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_positive_rescaling_leaves_mask_unchanged(values, scale):
    base = mask_from_cam(ActivationMap(values, 0), 0.6, (16, 16)).values
    scaled = mask_from_cam(ActivationMap(values * scale, 0), 0.6, (16, 16)).values
    assert np.array_equal(base, scaled)


def test_threshold_domain():
    with pytest.raises(ValueError):
        mask_from_cam(ActivationMap(np.eye(4), 0), 1.0, (8, 8))


# -- mask_to_bbox ------------------------------------------------------------


def _mask(points, h=8, w=8):
    m = np.zeros((h, w), np.uint8)
    for x, y in points:
        m[y, x] = 1
    return BinaryMask(m, 0.6)


def test_point_box():
    assert mask_to_bbox(_mask([(2, 3)])).as_tuple() == (2, 3, 2, 3)


def test_full_box():
    assert mask_to_bbox(BinaryMask(np.ones((32, 32), np.uint8), 0.6)).as_tuple() == (0, 0, 31, 31)


def test_l_shape_box():
    pts = [(1, 1), (1, 4), (3, 1)]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    assert (min(xs), min(ys), max(xs), max(ys)) == (1, 1, 3, 4)
    assert mask_to_bbox(_mask(pts)).as_tuple() == (1, 1, 3, 4)


def test_empty_mask_signals():
    with pytest.raises(EmptyForeground):
        mask_to_bbox(np.zeros((4, 4), np.uint8))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (6, 7), elements=st.integers(0, 1)))
def test_bbox_is_tight(m):
    if not m.any():
        return
    b = mask_to_bbox(m)
    inside = m[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1]
    assert inside.sum() == m.sum()
    assert m[b.y_min, b.x_min : b.x_max + 1].any() and m[b.y_max, b.x_min : b.x_max + 1].any()
    assert m[b.y_min : b.y_max + 1, b.x_min].any() and m[b.y_min : b.y_max + 1, b.x_max].any()


# -- composite ---------------------------------------------------------------


def test_full_bbox_returns_original():
    a, b = _image(5, 16), _image(6, 16)
    assert np.array_equal(composite(a, b, BoundingBox.full(16, 16)), a)


def test_corner_bbox_returns_reconstruction_elsewhere():
    a, b = _image(5, 16), _image(6, 16)
    out = composite(a, b, BoundingBox(0, 0, 0, 0))
    expected = b.copy()
    expected[0, 0] = a[0, 0]
    assert np.array_equal(out, expected)


@pytest.mark.parametrize("seed", range(10))
def test_composite_per_pixel_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = composite(a, b, BoundingBox(2, 2, 5, 5))
    for y in range(8):
        for x in range(8):
            src = a if (2 <= x <= 5 and 2 <= y <= 5) else b
            assert np.array_equal(out[y, x], src[y, x])


def test_composite_dim_mismatch():
    with pytest.raises(ValueError):
        composite(_image(0, 8), _image(0, 16), BoundingBox(0, 0, 1, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**31))
def test_composite_partition_and_idempotence(x0, x1, y0, y1, seed):
    box = BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = composite(a, b, box)
    m = box.mask(8, 8).astype(bool)
    assert np.array_equal(out[m], a[m]) and np.array_equal(out[~m], b[~m])
    assert np.array_equal(composite(a, a, box), a)
