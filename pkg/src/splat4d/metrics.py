"""PSNR, SSIM and DSSIM for images in [0, 1]."""

from __future__ import annotations

import numpy as np
from numba import njit

C1 = 0.01**2
C2 = 0.03**2


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical images give +inf."""
    a, b = _check_shapes(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@njit(cache=True)
def _blur_kernel(img, w):
    # zero-padded "same" correlation along rows then columns; img is (H, W, C)
    h, wd, c = img.shape
    r = (len(w) - 1) // 2
    tmp = np.zeros_like(img)
    for i in range(h):
        for k in range(len(w)):
            ii = i + k - r
            if ii < 0 or ii >= h:
                continue
            wk = w[k]
            for j in range(wd):
                for ch in range(c):
                    tmp[i, j, ch] += wk * img[ii, j, ch]
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(wd):
            for k in range(len(w)):
                jj = j + k - r
                if jj < 0 or jj >= wd:
                    continue
                wk = w[k]
                for ch in range(c):
                    out[i, j, ch] += wk * tmp[i, jj, ch]
    return out


def _blur(img, size, sigma):
    # symmetric window, so the operator is self-adjoint
    shape = img.shape
    flat = np.ascontiguousarray(img.reshape(shape[0], shape[1], -1), dtype=np.float64)
    return _blur_kernel(flat, gaussian_window(size, sigma)).reshape(shape)


def ssim_with_grad(a, b, window: int = 11, sigma: float = 1.5, need_grad: bool = True):
    """Mean SSIM over all pixels and channels, and d SSIM / d a."""
    a, b = _check_shapes(a, b)
    # blur all five statistics maps in one pass over a stacked trailing axis
    stats = _blur(np.stack([a, b, a * a, b * b, a * b], axis=-1), window, sigma)
    mu_a, mu_b = stats[..., 0], stats[..., 1]
    var_a = stats[..., 2] - mu_a**2
    var_b = stats[..., 3] - mu_b**2
    cov = stats[..., 4] - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * cov + C2
    B1 = mu_a**2 + mu_b**2 + C1
    B2 = var_a + var_b + C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    n = smap.size
    denom = B1 * B2
    d_mu = (2 * mu_b * A2) / denom - smap * 2 * mu_a / B1
    d_var = -smap / B2
    d_cov = 2 * A1 / denom
    # SSIM written in terms of blur(a), blur(a^2), blur(ab)
    g_m1 = (d_mu - 2 * mu_a * d_var - mu_b * d_cov) / n
    g_m2 = d_var / n
    g_m3 = d_cov / n
    back = _blur(np.stack([g_m1, g_m2, g_m3], axis=-1), window, sigma)
    grad = back[..., 0] + 2 * a * back[..., 1] + b * back[..., 2]
    return value, grad


def ssim(a, b) -> float:
    return ssim_with_grad(a, b, need_grad=False)[0]


def dssim(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0
