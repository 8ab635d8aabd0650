"""
Rendering a handful of splats and checking one gradient
=======================================================

Projects a small random cloud, composites it front to back and compares the
analytic gradient of a scalar loss against a central difference.
"""

import sys
from pathlib import Path

import numpy as np

from splat4d.io import write_png
from splat4d.rasterizer import RasterSettings, render, render_backward
from splat4d.scene import Camera, GaussianCloud

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
rng = np.random.default_rng(0)

# twelve splats in front of a camera looking down +z
n = 12
q = rng.normal(size=(n, 4))
cloud = GaussianCloud(
    rng.uniform(-1, 1, (n, 3)) * [1, 1, 0.5],
    q / np.linalg.norm(q, axis=1, keepdims=True),
    np.log(rng.uniform(0.1, 0.3, (n, 3))),
    rng.normal(size=n),
    rng.normal(scale=0.5, size=(n, 4, 3)),
    np.zeros(n),
)
cam = Camera.look_at(np.array([0, 0, -4.0]), np.zeros(3), np.array([0, -1.0, 0]), 64, 64, 60)

out = render(cloud, cam, background=(0.05, 0.05, 0.1))
write_png(out_dir / "splats.png", np.clip(out.color, 0, 1))
print(f"{len(out.projected)} of {n} splats visible, {len(out.rec_gid)} pixel contributions")

# loss = sum of red channel; gradient w.r.t. the first splat's x position
smooth = RasterSettings(alpha_min=0.0, sigma_cutoff=1e3, t_min=0.0)
g_img = np.zeros((64, 64, 3))
g_img[..., 0] = 1.0
grads, _ = render_backward(render(cloud, cam, settings=smooth), g_img)

h = 1e-4
cloud.means[0, 0] += h
up = render(cloud, cam, settings=smooth).color[..., 0].sum()
cloud.means[0, 0] -= 2 * h
down = render(cloud, cam, settings=smooth).color[..., 0].sum()
cloud.means[0, 0] += h
print(f"d loss / d x0: analytic {grads['means'][0, 0]:.6f}, finite difference {(up - down) / (2 * h):.6f}")
