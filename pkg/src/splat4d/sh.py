"""Real spherical-harmonic color evaluation (degrees 0-3) and its reverse pass."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Basis values (N, K) at unit directions, optionally with d basis / d dir (N, K, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    K = num_sh_coeffs(degree)
    B = np.empty((n, K))
    dB = np.zeros((n, K, 3)) if with_grad else None
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        if with_grad:
            dB[:, 1, 1] = -SH_C1
            dB[:, 2, 2] = SH_C1
            dB[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
        if with_grad:
            dB[:, 4] = SH_C2[0] * np.stack([y, x, 0 * x], -1)
            dB[:, 5] = SH_C2[1] * np.stack([0 * x, z, y], -1)
            dB[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
            dB[:, 7] = SH_C2[3] * np.stack([z, 0 * x, x], -1)
            dB[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
        if with_grad:
            zero = 0 * x
            dB[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
            dB[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], -1)
            dB[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
            dB[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
            dB[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
            dB[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
            dB[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return B, dB


def eval_sh(sh_coeffs: np.ndarray, means: np.ndarray, cam_center: np.ndarray):
    """RGB = max(SH(dir) . coeffs + 0.5, 0) with dir the unit vector camera -> mean.

    Returns (rgb, cache) where the cache feeds :func:`eval_sh_backward`.
    """
    degree = int(round(np.sqrt(sh_coeffs.shape[1]))) - 1
    raw = np.asarray(means, dtype=np.float64) - cam_center
    length = np.linalg.norm(raw, axis=1, keepdims=True)
    dirs = raw / np.maximum(length, 1e-12)
    B, dB = sh_basis(dirs, degree, with_grad=degree > 0)
    rgb = np.einsum("nk,nkc->nc", B, np.asarray(sh_coeffs, dtype=np.float64)) + 0.5
    clamped = rgb < 0.0
    rgb = np.maximum(rgb, 0.0)
    return rgb, (B, dB, dirs, length, clamped, sh_coeffs, degree)


def eval_sh_backward(cache, grad_rgb: np.ndarray):
    """Gradients w.r.t. (sh_coeffs, means) from dL/drgb."""
    B, dB, dirs, length, clamped, sh_coeffs, degree = cache
    g = np.where(clamped, 0.0, grad_rgb)
    d_sh = B[:, :, None] * g[:, None, :]
    if degree == 0:
        return d_sh, np.zeros_like(dirs)
    # d rgb_c / d dir = sum_k dB[k] * coeff[k, c]
    d_dir = np.einsum("nc,nkc,nkj->nj", g, np.asarray(sh_coeffs, dtype=np.float64), dB)
    d_means = (d_dir - dirs * (d_dir * dirs).sum(1, keepdims=True)) / np.maximum(length, 1e-12)
    return d_sh, d_means
