import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_differences, rel_l2
from maskexplain.core import (InvalidInputError, InvalidParameterError, UnsupportedExponentError, blur,
                              gaussian_kernel, normalize_heatmap, tv_energy, tv_gradient, upsample_mask)


def naive_tv(m, beta):
    h, w = m.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            if j + 1 < w:
                total += abs(m[i, j + 1] - m[i, j]) ** beta
            if i + 1 < h:
                total += abs(m[i + 1, j] - m[i, j]) ** beta
    return total


def direct_conv2d_edge(img, k1):
    """Full 2-D convolution with the outer-product kernel, edge-replicated."""
    r = (len(k1) - 1) // 2
    k2 = np.outer(k1, k1)
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    ii = min(max(i + a, 0), h - 1)
                    jj = min(max(j + b, 0), w - 1)
                    acc += k2[a + r, b + r] * img[ii, jj]
            out[i, j] = acc
    return out


class TestGaussianKernel:
    def test_zero_sigma_is_identity(self):
        k = gaussian_kernel(0)
        assert k.radius == 0
        np.testing.assert_array_equal(k.weights, [1.0])

    def test_sigma_one_matches_normalized_exponentials(self):
        taps = np.array([math.exp(-(i * i) / 2.0) for i in range(-3, 4)])
        expected = taps / taps.sum()
        k = gaussian_kernel(1.0)
        assert k.radius == 3
        np.testing.assert_allclose(k.weights, expected, atol=1e-15)
        # 0.39894 is the unnormalized peak density 1/sqrt(2 pi)
        z = sum(math.exp(-(i * i) / 2.0) / math.sqrt(2 * math.pi) for i in range(-3, 4))
        assert k.weights[3] == pytest.approx(0.39894228 / z, rel=1e-7)

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5, 5.0, 10.0])
    def test_normalized_and_symmetric(self, sigma):
        k = gaussian_kernel(sigma)
        assert abs(k.weights.sum() - 1.0) <= 1e-12
        np.testing.assert_array_equal(k.weights, k.weights[::-1])
        assert k.radius == math.ceil(3 * sigma)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -1.0])
    def test_rejects_bad_sigma(self, bad):
        with pytest.raises(InvalidParameterError):
            gaussian_kernel(bad)


class TestBlur:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0, 10.0])
    def test_constant_image_is_fixed(self, sigma):
        img = np.full((12, 9, 3), 0.37)
        np.testing.assert_allclose(blur(img, sigma), img, atol=1e-6)

    def test_sigma_zero_copies(self):
        img = np.random.default_rng(0).random((5, 6, 2))
        out = blur(img, 0)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_delta_matches_direct_2d_convolution(self):
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        expected = direct_conv2d_edge(img, gaussian_kernel(1.0).weights)
        np.testing.assert_allclose(blur(img, 1.0), expected, atol=1e-6)

    def test_random_image_matches_direct_convolution_with_borders(self):
        img = np.random.default_rng(3).random((7, 8))
        expected = direct_conv2d_edge(img, gaussian_kernel(1.5).weights)
        np.testing.assert_allclose(blur(img, 1.5), expected, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1), st.floats(0, 4))
    def test_linearity(self, a, b, seed, sigma):
        rng = np.random.default_rng(seed)
        x, y = rng.random((2, 6, 7, 2))
        np.testing.assert_allclose(blur(a * x + b * y, sigma), a * blur(x, sigma) + b * blur(y, sigma), atol=1e-6)


class TestTv:
    def test_constant_mask_is_zero(self):
        assert tv_energy(np.full((5, 5), 0.3), 3) == 0.0

    def test_two_horizontal_steps(self):
        assert tv_energy(np.array([[0.0, 1.0], [0.0, 1.0]]), 3) == 2.0

    def test_matches_naive_loop(self):
        m = np.random.default_rng(1).random((8, 8))
        assert abs(tv_energy(m, 3) - naive_tv(m, 3)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.integers(0, 100).map(lambda k: k / 100)),
           st.sampled_from([1.0, 2.0, 3.0]))
    def test_nonnegative_and_zero_iff_constant(self, m, beta):
        e = tv_energy(m, beta)
        assert e >= 0
        assert (e == 0) == bool(np.all(m == m.flat[0]))

    def test_gradient_constant_mask(self):
        np.testing.assert_array_equal(tv_gradient(np.full((4, 3), 0.5), 2), 0)

    def test_gradient_two_steps_beta2(self):
        np.testing.assert_allclose(tv_gradient(np.array([[0.0, 1.0], [0.0, 1.0]]), 2), [[-2, 2], [-2, 2]])

    def test_gradient_finite_differences_beta3(self):
        m = np.random.default_rng(2).random((6, 6))
        fd = central_differences(lambda v: tv_energy(v, 3), m, h=1e-6)
        assert rel_l2(tv_gradient(m, 3), fd) < 1e-5

    @pytest.mark.parametrize("beta", [2.0, 3.0])
    def test_gradient_fd_on_50_masks(self, beta):
        rng = np.random.default_rng(10)
        for _ in range(50):
            m = rng.random((6, 6))
            fd = central_differences(lambda v: tv_energy(v, beta), m, h=1e-6)
            assert rel_l2(tv_gradient(m, beta), fd) < 1e-5

    def test_gradient_needs_beta_above_one(self):
        with pytest.raises(UnsupportedExponentError):
            tv_gradient(np.zeros((2, 2)), 1.0)


def direct_upsample(m, s, sigma, out_h, out_w):
    out = np.zeros((out_h, out_w))
    for vy in range(out_h):
        for vx in range(out_w):
            num = den = 0.0
            for uy in range(m.shape[0]):
                for ux in range(m.shape[1]):
                    cy, cx = s * uy + (s - 1) / 2, s * ux + (s - 1) / 2
                    g = math.exp(-((vy - cy) ** 2 + (vx - cx) ** 2) / (2 * sigma**2))
                    num += g * m[uy, ux]
                    den += g
            out[vy, vx] = num / den
    return out


class TestUpsample:
    @pytest.mark.parametrize("scale,sigma", [(1, 1.0), (4, 2.0), (8, 5.0)])
    def test_constant_stays_constant(self, scale, sigma):
        out = upsample_mask(np.full((3, 4), 0.6), scale, sigma, 3 * scale, 4 * scale)
        np.testing.assert_allclose(out, 0.6, atol=1e-6)

    def test_single_cell(self):
        np.testing.assert_allclose(upsample_mask([[0.7]], 8, 5, 8, 8), np.full((8, 8), 0.7), atol=1e-12)

    @pytest.mark.parametrize("u0", [(1, 1), (1, 2), (2, 1), (2, 2)])
    def test_one_hot_peak_near_cell_centre(self, u0):
        m = np.zeros((4, 4))
        m[u0] = 1.0
        out = upsample_mask(m, 8, 5, 32, 32)
        direct = direct_upsample(m, 8, 5, 32, 32)
        np.testing.assert_allclose(out, direct, atol=1e-12)
        peak = np.unravel_index(np.argmax(direct), direct.shape)
        centre = 8 * np.array(u0) + 3.5
        assert np.all(np.abs(np.array(peak) - centre) <= 1.0)

    def test_matches_direct_formula_cropped(self):
        m = np.random.default_rng(4).random((3, 5))
        np.testing.assert_allclose(upsample_mask(m, 3, 1.5, 8, 14), direct_upsample(m, 3, 1.5, 8, 14), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)), st.floats(0, 1))
    def test_commutes_with_scaling_and_stays_in_unit_interval(self, m, c):
        up = upsample_mask(m, 4, 2.0, 12, 12)
        np.testing.assert_allclose(upsample_mask(c * m, 4, 2.0, 12, 12), c * up, atol=1e-6)
        assert up.min() >= 0 and up.max() <= 1


class TestNormalize:
    def test_affine(self):
        np.testing.assert_allclose(normalize_heatmap([[2, 4], [6, 10]]), [[0, 0.25], [0.5, 1.0]])

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(normalize_heatmap([[5, 5]]), [[0, 0]])

    def test_unit_range_unchanged(self):
        h = np.array([[0.0, 0.3], [1.0, 0.5]])
        np.testing.assert_array_equal(normalize_heatmap(h), h)

    def test_all_nan_rejected(self):
        with pytest.raises(InvalidInputError):
            normalize_heatmap(np.full((2, 2), np.nan))
