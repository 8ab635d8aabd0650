"""Multi-head MLP decoder and the canonical -> time-t deformation of dynamic Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashgrid import HashGrid4D
from .scene import GaussianCloud
from .sh import num_sh_coeffs

HEADS = ("means", "log_scales", "rotations", "opacity_logits", "sh_coeffs")


def _relu(x):
    return np.maximum(x, 0.0)


class FeatureDecoder:
    """Fusion MLP (L*F -> 64 -> 64) feeding five two-layer heads.

    Hidden layers use ReLU, outputs are linear. Head output layers start at zero
    so an untrained decoder is the identity deformation.
    """

    def __init__(self, in_dim: int, sh_degree: int = 1, hidden: int = 64, feature_dim: int = 64,
                 seed: int = 0, dtype=np.float32):
        self.in_dim = in_dim
        self.sh_degree = sh_degree
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.out_dims = {"means": 3, "log_scales": 3, "rotations": 4, "opacity_logits": 1,
                         "sh_coeffs": 3 * num_sh_coeffs(sh_degree)}
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}

        def linear(name, n_in, n_out, zero=False):
            bound = 1.0 / np.sqrt(n_in)
            if zero:
                w, b = np.zeros((n_out, n_in)), np.zeros(n_out)
            else:
                w = rng.uniform(-bound, bound, (n_out, n_in))
                b = rng.uniform(-bound, bound, n_out)
            self.params[f"{name}.w"] = w.astype(dtype)
            self.params[f"{name}.b"] = b.astype(dtype)

        linear("fusion.0", in_dim, hidden)
        linear("fusion.1", hidden, feature_dim)
        for head in HEADS:
            linear(f"{head}.0", feature_dim, hidden)
            linear(f"{head}.1", hidden, self.out_dims[head], zero=True)
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros(v.shape) for k, v in self.params.items()}

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "sh_degree": self.sh_degree, "hidden": self.hidden,
                "feature_dim": self.feature_dim}

    def _mlp(self, name, x):
        w0 = self.params[f"{name}.0.w"].astype(np.float64)
        b0 = self.params[f"{name}.0.b"].astype(np.float64)
        w1 = self.params[f"{name}.1.w"].astype(np.float64)
        b1 = self.params[f"{name}.1.b"].astype(np.float64)
        pre = x @ w0.T + b0
        h = _relu(pre)
        return h @ w1.T + b1, (x, pre, h)

    def _mlp_backward(self, name, cache, g_out):
        x, pre, h = cache
        w0 = self.params[f"{name}.0.w"].astype(np.float64)
        w1 = self.params[f"{name}.1.w"].astype(np.float64)
        self.grads[f"{name}.1.w"] += g_out.T @ h
        self.grads[f"{name}.1.b"] += g_out.sum(0)
        g_pre = (g_out @ w1) * (pre > 0)
        self.grads[f"{name}.0.w"] += g_pre.T @ x
        self.grads[f"{name}.0.b"] += g_pre.sum(0)
        return g_pre @ w0

    def forward(self, features: np.ndarray):
        """Deltas per head for (N, in_dim) hash features."""
        f_d, fcache = self._mlp("fusion", np.asarray(features, dtype=np.float64))
        out, caches = {}, {"fusion": fcache}
        for head in HEADS:
            out[head], caches[head] = self._mlp(head, f_d)
        return out, caches

    def backward(self, caches, g_heads: dict[str, np.ndarray]) -> np.ndarray:
        g_fd = 0.0
        for head in HEADS:
            g_fd = g_fd + self._mlp_backward(head, caches[head], g_heads[head])
        return self._mlp_backward("fusion", caches["fusion"], g_fd)


@dataclass
class DeformCache:
    dynamic_index: np.ndarray
    positions: np.ndarray
    t: float
    decoder_cache: dict | None


def deform(cloud: GaussianCloud, dynamic_index, grid: HashGrid4D, decoder: FeatureDecoder,
           t: float) -> tuple[GaussianCloud, DeformCache]:
    """Deformed pre-activation parameters at normalized time ``t``.

    Deltas are added in parameter space (means, log-scales, raw quaternion, opacity
    logit, SH); the rasterizer applies exp / normalize / sigmoid. Rows outside
    ``dynamic_index`` are copied unchanged.
    """
    dyn = np.asarray(dynamic_index, dtype=np.int64)
    if len(dyn) and (dyn.min() < 0 or dyn.max() >= len(cloud)):
        raise IndexError("dynamic index out of range")
    out = GaussianCloud(
        cloud.means.astype(np.float64), cloud.rotations.astype(np.float64),
        cloud.log_scales.astype(np.float64), cloud.opacity_logits.astype(np.float64),
        cloud.sh_coeffs.astype(np.float64), cloud.dynamic_params.astype(np.float64),
        cloud.dynamic_flags.copy(), cloud.classified,
    )
    if len(dyn) == 0:
        return out, DeformCache(dyn, np.zeros((0, 3)), t, None)
    pos = out.means[dyn].copy()
    deltas, caches = decoder.forward(grid.encode(pos, t))
    out.means[dyn] += deltas["means"]
    out.log_scales[dyn] += deltas["log_scales"]
    out.rotations[dyn] += deltas["rotations"]
    out.opacity_logits[dyn] += deltas["opacity_logits"][:, 0]
    out.sh_coeffs[dyn] += deltas["sh_coeffs"].reshape(len(dyn), -1, 3)
    return out, DeformCache(dyn, pos, t, caches)


def deform_backward(cache: DeformCache, grid: HashGrid4D, decoder: FeatureDecoder,
                    grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Push deformed-parameter gradients into decoder/grid accumulators.

    Returns canonical gradients: the direct term for every row plus, for dynamic
    means, the path through the hash encoder's interpolation weights.
    """
    if cache is None:
        raise ValueError("deform_backward needs the forward cache")
    out = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    dyn = cache.dynamic_index
    if len(dyn) == 0:
        return out
    g_heads = {
        "means": out["means"][dyn],
        "log_scales": out["log_scales"][dyn],
        "rotations": out["rotations"][dyn],
        "opacity_logits": out["opacity_logits"][dyn][:, None],
        "sh_coeffs": out["sh_coeffs"][dyn].reshape(len(dyn), -1),
    }
    g_feat = decoder.backward(cache.decoder_cache, g_heads)
    out["means"][dyn] += grid.encode_backward(cache.positions, cache.t, g_feat)
    return out
