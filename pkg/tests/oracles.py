"""Independent reference implementations used as test oracles."""

import numpy as np

from splat4d.rasterizer import RasterSettings
from splat4d.scene import Camera, GaussianCloud

# settings that remove every non-smooth branch so finite differences are meaningful
SMOOTH = RasterSettings(alpha_min=0.0, sigma_cutoff=1e3, t_min=0.0)


def random_cloud(rng, n, sh_degree=1, dtype=np.float64, depth_spread=0.5):
    k = (sh_degree + 1) ** 2
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.normal(scale=0.3, size=(n, k, 3))
    sh[:, 0, :] = rng.uniform(0.5, 1.5, (n, 3))
    means = rng.uniform(-1, 1, (n, 3))
    # evenly spaced shuffled depths so a finite-difference step never reorders splats
    gap = 2 * depth_spread / max(n, 1)
    means[:, 2] = rng.permutation(np.linspace(-depth_spread, depth_spread, n)) + rng.uniform(-0.2, 0.2, n) * gap
    cloud = GaussianCloud(
        means, q,
        np.log(rng.uniform(0.1, 0.3, (n, 3))), rng.normal(size=n) * 0.5, sh, rng.normal(size=n),
    )
    for name in ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "dynamic_params"):
        setattr(cloud, name, getattr(cloud, name).astype(dtype))
    return cloud


def small_camera(size=32, fov=60.0, eye=(0.0, 0.0, -4.0), camera_id=0):
    return Camera.look_at(np.array(eye), np.zeros(3), np.array([0.0, -1.0, 0.0]), size, size, fov, camera_id)


def central_difference(f, arr, index, h=1e-3):
    """d f / d arr[index] by central differences (arr is modified in place and restored)."""
    flat = arr.reshape(-1)
    v = flat[index]
    flat[index] = v + h
    fp = f()
    flat[index] = v - h
    fm = f()
    flat[index] = v
    return (fp - fm) / (2 * h)


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-5, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    # an entry passes if it meets either the absolute or the relative bound
    bad = (err > atol) & (err > rtol * np.abs(numeric))
    assert not bad.any(), (f"{label}: {bad.sum()} entries off; worst abs err {err.max():.3e}, "
                           f"analytic {analytic[bad][:3]}, numeric {numeric[bad][:3]}")


def replay_composite(projected, camera, background, settings=RasterSettings()):
    """Per-pixel front-to-back compositing over every projected splat, without tiles.

    Returns (color image, final transmittance, list of per-pixel [(splat, weight)]).
    The footprint test is re-derived here from the 2D covariance.
    """
    H, W = camera.height, camera.width
    order = np.lexsort((projected.index, projected.depth))
    img = np.zeros((H, W, 3))
    final_T = np.zeros((H, W))
    contrib = []
    rx = settings.sigma_cutoff * np.sqrt(projected.cov2d[:, 0, 0])
    ry = settings.sigma_cutoff * np.sqrt(projected.cov2d[:, 1, 1])
    inv = np.linalg.inv(projected.cov2d)
    for py in range(H):
        for px in range(W):
            T = 1.0
            acc = np.zeros(3)
            rows = []
            for g in order:
                d = np.array([px, py]) - projected.mean2d[g]
                if abs(d[0]) > rx[g] or abs(d[1]) > ry[g]:
                    continue
                power = -0.5 * d @ inv[g] @ d
                if power > 0:
                    continue
                a = min(settings.alpha_max, projected.opacity[g] * np.exp(power))
                if a < settings.alpha_min:
                    continue
                acc += projected.color[g] * a * T
                rows.append((g, a * T))
                T *= 1 - a
                if T < settings.t_min:
                    break
            img[py, px] = acc + T * np.asarray(background)
            final_T[py, px] = T
            contrib.append(rows)
    return img, final_T, contrib


def naive_ssim(a, b, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Sliding-window SSIM with explicit zero padding, averaged over pixels and channels."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    r = size // 2
    H, W, C = a.shape
    pa = np.pad(a, ((r, r), (r, r), (0, 0)))
    pb = np.pad(b, ((r, r), (r, r), (0, 0)))
    vals = []
    for c in range(C):
        for i in range(H):
            for j in range(W):
                wa = pa[i:i + size, j:j + size, c]
                wb = pb[i:i + size, j:j + size, c]
                ma, mb = (win * wa).sum(), (win * wb).sum()
                va = (win * wa * wa).sum() - ma**2
                vb = (win * wb * wb).sum() - mb**2
                cov = (win * wa * wb).sum() - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def payload_grad_from_records(output, grad1):
    """Per-splat d gradient assembled from the recorded lists.

    Each record adds grad1[pixel] * (alpha * prod(1 - earlier alphas)); the
    transmittance is rebuilt here from the recorded alphas alone.
    """
    grad1 = np.asarray(grad1, dtype=np.float64).reshape(-1)
    out = np.zeros(len(output.projected))
    for pix in range(len(output.offsets) - 1):
        T = 1.0
        for k in range(output.offsets[pix], output.offsets[pix + 1]):
            a = output.rec_alpha[k]
            out[output.rec_gid[k]] += grad1[pix] * (a * T)
            T = T * (1.0 - a)
    return out


def importance_oracle(cloud, cameras, times, grid=None, decoder=None, settings=RasterSettings()):
    """Max blending weight per Gaussian by exhaustive per-pixel replay."""
    from splat4d.deform import deform
    from splat4d.rasterizer import project

    w = np.zeros(len(cloud))
    dyn = np.flatnonzero(cloud.dynamic_flags)
    for cam in cameras:
        for t in times:
            scene = deform(cloud, dyn, grid, decoder, t)[0] if grid is not None else cloud
            proj = project(scene, cam, settings)
            _, _, contrib = replay_composite(proj, cam, (0, 0, 0), settings)
            for rows in contrib:
                for g, x in rows:
                    src = proj.index[g]
                    w[src] = max(w[src], x)
    return w
