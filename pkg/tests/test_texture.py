import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geotex.texture import (DensifyStats, TextureMaps, adaptive_threshold, gradient_map,
                            select_blur_splats, texture_weight, weighted_contribution)


def sobel_reference(gray):
    """Direct 3x3 Sobel on interior pixels, luminance already computed."""
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    H, W = gray.shape
    out = np.zeros((H, W))
    for i in range(1, H - 1):
        for j in range(1, W - 1):
            patch = gray[i - 1:i + 2, j - 1:j + 2]
            gx = (patch * kx).sum()
            gy = (patch * kx.T).sum()
            out[i, j] = math.hypot(gx, gy) / 4.0
    return np.clip(out, 0, 1)


class TestGradientMap:
    def test_constant_image(self):
        np.testing.assert_array_equal(gradient_map(np.full((8, 8, 3), 0.4)), 0.0)

    def test_vertical_step_peaks_at_one(self):
        img = np.zeros((10, 10, 3))
        img[:, 5:] = 1.0
        g = gradient_map(img)
        assert g.max() == pytest.approx(1.0)
        np.testing.assert_allclose(g[:, 4], 1.0)
        np.testing.assert_allclose(g[:, 5], 1.0)
        np.testing.assert_array_equal(g[:, :3], 0.0)

    def test_checkerboard_matches_direct_convolution(self):
        yy, xx = np.mgrid[:12, :12]
        gray = (((xx // 2) + (yy // 2)) % 2).astype(float)
        img = np.repeat(gray[..., None], 3, axis=2)
        ref = sobel_reference(gray)
        np.testing.assert_allclose(gradient_map(img)[1:-1, 1:-1], ref[1:-1, 1:-1], atol=1e-12)

    def test_luma_weights(self, rng):
        img = rng.uniform(size=(9, 9, 3))
        gray = img @ np.array([0.299, 0.587, 0.114])
        np.testing.assert_allclose(gradient_map(img)[1:-1, 1:-1],
                                   sobel_reference(gray)[1:-1, 1:-1], atol=1e-12)

    @given(arrays(np.float64, (6, 7, 3), elements=st.floats(0, 1)))
    def test_range(self, img):
        g = gradient_map(img)
        assert np.all((g >= 0) & (g <= 1))


class TestTextureWeight:
    def test_midpoint(self):
        assert texture_weight(0.16) == 0.5

    def test_zero_gradient(self):
        assert texture_weight(0.0) == pytest.approx((math.tanh(-3.2) + 1) / 2, rel=1e-12)
        assert texture_weight(0.0) == pytest.approx(0.00166, abs=1e-5)

    def test_saturation(self):
        assert abs(texture_weight(1.0) - 1.0) < 1e-9

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert texture_weight(lo) <= texture_weight(hi)

    def test_maps_bundle(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        m = TextureMaps.from_image(img)
        np.testing.assert_array_equal(m.weight, texture_weight(gradient_map(img)))


class TestWeightedContribution:
    def test_unit_weight_is_pixel_count(self, rng):
        imax = rng.integers(-1, 5, size=(8, 8))
        got = weighted_contribution(imax, np.ones((8, 8)), 5)
        np.testing.assert_array_equal(got, np.bincount(imax[imax >= 0], minlength=5))

    def test_zero_weight(self, rng):
        imax = rng.integers(-1, 5, size=(8, 8))
        np.testing.assert_array_equal(weighted_contribution(imax, np.zeros((8, 8)), 5), 0.0)

    @given(st.integers(0, 2 ** 31))
    def test_matches_double_loop(self, seed):
        r = np.random.default_rng(seed)
        imax = r.integers(-1, 6, size=(8, 8))
        w = r.uniform(size=(8, 8))
        ref = np.zeros(6)
        for i in range(8):
            for j in range(8):
                if imax[i, j] >= 0:
                    ref[imax[i, j]] += w[i, j]
        np.testing.assert_allclose(weighted_contribution(imax, w, 6), ref, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_contribution(np.zeros((2, 2), int), np.zeros((3, 3)), 1)


class TestThreshold:
    def test_endpoints_and_midpoint(self):
        assert adaptive_threshold(500, 500, 15000) == 40.0
        assert adaptive_threshold(15000, 500, 15000) == 4.0
        assert adaptive_threshold(7750, 500, 15000) == pytest.approx(22.0)

    def test_clamped(self):
        assert adaptive_threshold(0, 500, 15000) == 40.0
        assert adaptive_threshold(10 ** 6, 500, 15000) == 4.0

    def test_bad_window(self):
        with pytest.raises(ValueError):
            adaptive_threshold(1, 10, 10)

    @given(st.floats(0, 20000), st.floats(0, 20000))
    def test_non_increasing(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert adaptive_threshold(lo, 500, 15000) >= adaptive_threshold(hi, 500, 15000)


class TestSelection:
    def test_empty(self):
        s = DensifyStats.zeros(4)
        assert select_blur_splats(s, 40.0).size == 0

    def test_strict_inequality(self):
        s = DensifyStats.zeros(3)
        s.weighted_area[:] = [10.0, 41.0, 40.0]
        np.testing.assert_array_equal(select_blur_splats(s, 40.0), [1])

    def test_stats_accumulate_max_over_views(self):
        from types import SimpleNamespace

        s = DensifyStats.zeros(2)
        a = SimpleNamespace(visible=np.array([True, False]), weighted_area=np.array([5.0, 0.0]),
                            contribution_count=np.array([7.0, 0.0]))
        b = SimpleNamespace(visible=np.array([True, True]), weighted_area=np.array([3.0, 2.0]),
                            contribution_count=np.array([9.0, 4.0]))
        s.add_view(0, a, np.array([1.0, 9.0]))
        s.add_view(1, b, np.array([3.0, 4.0]))
        np.testing.assert_array_equal(s.weighted_area, [5.0, 2.0])
        np.testing.assert_array_equal(s.area, [9.0, 4.0])
        np.testing.assert_array_equal(s.grad_norm_avg, [2.0, 4.0])
        assert s.views_seen == {0, 1}
