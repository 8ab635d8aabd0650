import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.metrics import dssim, psnr, ssim, ssim_with_grad

from oracles import assert_grad_close, central_difference, naive_ssim


def test_psnr_known_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_sliding_window_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(14, 17, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-12)


def test_ssim_identity_and_dssim():
    a = np.random.default_rng(0).uniform(size=(12, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert dssim(a, a) == pytest.approx(0.0)
    b = 1 - a
    assert dssim(a, b) == pytest.approx((1 - ssim(a, b)) / 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 12, 3))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(9, 10, 3))
    b = rng.uniform(size=(9, 10, 3))
    _, g = ssim_with_grad(a, b)
    num = np.array([central_difference(lambda: ssim(a, b), a, i, 1e-6) for i in range(a.size)])
    assert_grad_close(g.reshape(-1), num, label="ssim")
