import numpy as np
import pytest

from conftest import central_differences, rel_l2
from maskexplain.core import InputShapeError, blur
from maskexplain.perturb import PerturbSpec, apply, apply_with_input_gradient, fully_perturbed

KIND_SPECS = {
    "constant": PerturbSpec("constant", mu0=(0.3,)),
    "noise": PerturbSpec("noise", mu0=(0.3,), noise_seed=5),
    "blur": PerturbSpec("blur", sigma0=3.0),
}


@pytest.mark.parametrize("kind", sorted(KIND_SPECS))
def test_full_mask_is_identity(kind):
    x0 = np.random.default_rng(0).random((8, 9, 2))
    np.testing.assert_allclose(apply(KIND_SPECS[kind], x0, np.ones((8, 9))), x0, atol=1e-6)


def test_constant_fills():
    x0 = np.random.default_rng(0).random((4, 4, 1))
    np.testing.assert_allclose(apply(PerturbSpec("constant", mu0=(0.5,)), x0, np.zeros((4, 4))), 0.5)
    out = apply(PerturbSpec("constant", mu0=(0.5,)), np.ones((4, 4, 1)), np.full((4, 4), 0.5))
    np.testing.assert_allclose(out, 0.75)


def test_default_fill_is_channel_mean():
    x0 = np.random.default_rng(1).random((5, 5, 3))
    out = fully_perturbed(PerturbSpec("constant"), x0)
    np.testing.assert_allclose(out, np.broadcast_to(x0.mean(axis=(0, 1)), x0.shape))


def test_blur_with_zero_mask_is_full_blur():
    x0 = np.zeros((15, 15, 1))
    x0[7, 7] = 1.0
    spec = PerturbSpec("blur", sigma0=10.0)
    np.testing.assert_allclose(apply(spec, x0, np.zeros((15, 15))), blur(x0, 10.0), atol=5e-3)
    np.testing.assert_allclose(fully_perturbed(spec, x0), blur(x0, 10.0), atol=5e-3)


def test_blur_pyramid_interpolates_sigma():
    # m = 0.5 lands exactly on pyramid level sigma0/2
    x0 = np.random.default_rng(2).random((12, 12, 1))
    out = apply(PerturbSpec("blur", sigma0=4.0), x0, np.full((12, 12), 0.5))
    np.testing.assert_allclose(out, blur(x0, 2.0), atol=1e-12)


def test_flipped_blur_convention():
    x0 = np.random.default_rng(3).random((10, 10, 1))
    spec = PerturbSpec("blur", sigma0=4.0, flip_blur=True)
    np.testing.assert_allclose(apply(spec, x0, np.zeros((10, 10))), x0, atol=1e-12)
    np.testing.assert_allclose(apply(spec, x0, np.ones((10, 10))), blur(x0, 4.0), atol=1e-12)


def test_noise_reproducible():
    x0 = np.random.default_rng(4).random((6, 6, 1))
    spec = PerturbSpec("noise", noise_seed=11)
    assert fully_perturbed(spec, x0).tobytes() == fully_perturbed(spec, x0).tobytes()
    assert fully_perturbed(spec, x0).tobytes() != fully_perturbed(PerturbSpec("noise", noise_seed=12), x0).tobytes()


def test_constant_monotone_in_mask_when_image_above_fill():
    rng = np.random.default_rng(5)
    spec = PerturbSpec("constant", mu0=(0.2,))
    for _ in range(20):
        x0 = 0.2 + 0.8 * rng.random((5, 5, 1))
        lo = rng.random((5, 5))
        hi = np.minimum(1.0, lo + rng.random((5, 5)) * 0.5)
        assert np.all(apply(spec, x0, hi) >= apply(spec, x0, lo))


def test_shape_mismatch():
    with pytest.raises(InputShapeError):
        apply(KIND_SPECS["constant"], np.zeros((4, 4, 1)), np.ones((3, 4)))


def test_gradient_trivial_cases():
    spec = PerturbSpec("constant", mu0=(0.4,))
    x0 = np.full((3, 3, 1), 0.4)
    np.testing.assert_array_equal(apply_with_input_gradient(spec, x0, np.full((3, 3), 0.5), np.ones_like(x0)), 0)
    g = apply_with_input_gradient(PerturbSpec("constant", mu0=(0.0,)), np.ones((1, 1, 1)), [[0.3]], np.full((1, 1, 1), 2.0))
    np.testing.assert_allclose(g, [[2.0]])


@pytest.mark.parametrize("kind,tol", [("constant", 1e-4), ("noise", 1e-4), ("blur", 1e-2)])
def test_gradient_matches_fd_on_50_instances(kind, tol):
    rng = np.random.default_rng(7)
    spec = KIND_SPECS[kind]
    for _ in range(50):
        x0 = rng.random((8, 8, 2))
        m = rng.random((8, 8))
        up = rng.standard_normal((8, 8, 2))
        fd = central_differences(lambda v: np.sum(up * apply(spec, x0, v)), m, h=1e-6)
        assert rel_l2(apply_with_input_gradient(spec, x0, m, up), fd) < tol
