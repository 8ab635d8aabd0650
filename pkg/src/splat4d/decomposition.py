"""Temporal-variance pixel masks and optimization of the per-Gaussian dynamic parameter d."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .optim import Adam
from .rasterizer import RasterSettings, composite_payload, rasterize_backward, render
from .scene import Camera, GaussianCloud

SMOOTH_SIGMA = 5.0
SMOOTH_RADIUS = 15  # 31x31 kernel
PRED_EPS = 1e-7


@dataclass
class VarianceMaskSet:
    std_maps: list[np.ndarray]  # per-view temporal std S(x)
    variance_maps: list[np.ndarray]  # per-view smoothed variance V(x)
    masks: list[np.ndarray]  # per-view {0, 1} dynamic-pixel masks
    gamma: float
    n_frames: int

    def __len__(self) -> int:
        return len(self.masks)


def temporal_std(frames: np.ndarray) -> np.ndarray:
    """Population std over time of the channel-mean intensity; frames (T, H, W[, C])."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames.mean(axis=3)
    return frames.std(axis=0)


def smooth_variance(std: np.ndarray) -> np.ndarray:
    return gaussian_filter(std**2, sigma=SMOOTH_SIGMA, mode="reflect", radius=SMOOTH_RADIUS)


def compute_masks(videos, gamma: float = 0.02) -> VarianceMaskSet:
    """Binary dynamic-pixel masks, one per view.

    ``videos`` is a sequence of per-view frame stacks (T, H, W[, 3]). A pixel is
    dynamic when the square root of its smoothed temporal variance reaches gamma.
    """
    videos = [np.asarray(v) for v in videos]
    if not videos:
        raise ValueError("no views given")
    n_frames = len(videos[0])
    shape = videos[0].shape[1:]
    for v in videos:
        if len(v) < 2:
            raise ValueError("need at least 2 frames per view")
        if v.shape[1:] != shape or len(v) != n_frames:
            raise ValueError("all views need the same frame count and size")
    stds, variances, masks = [], [], []
    for v in videos:
        s = temporal_std(v)
        var = smooth_variance(s)
        stds.append(s)
        variances.append(var)
        masks.append((np.sqrt(var) >= gamma).astype(np.uint8))
    return VarianceMaskSet(stds, variances, masks, gamma, n_frames)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def bce_loss(predicted: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. the pre-sigmoid composite."""
    p = np.asarray(predicted, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64)
    pc = np.clip(p, PRED_EPS, 1.0 - PRED_EPS)
    loss = float(np.mean(-d * np.log(pc) - (1.0 - d) * np.log(1.0 - pc)))
    return loss, (p - d) / p.size


def optimize_dynamic_params(cloud: GaussianCloud, cameras: list[Camera], masks: VarianceMaskSet,
                            steps: int = 3000, lr: float = 0.05, seed: int = 0,
                            settings: RasterSettings = RasterSettings(),
                            background=(0.0, 0.0, 0.0)) -> list[float]:
    """Fit d against the masks with Adam on one random view per step.

    Only ``cloud.dynamic_params`` is modified. Geometry is frozen, so each view's
    contribution records are computed once and reused. Returns the loss trace.
    """
    if len(masks) == 0:
        raise ValueError("empty mask set")
    if len(masks) != len(cameras):
        raise ValueError("need one mask per camera")
    rng = np.random.default_rng(seed)
    renders = [render(cloud, cam, background, "dynamic_value", settings) for cam in cameras]
    targets = [np.asarray(m, dtype=np.float64) for m in masks.masks]
    opt = Adam({"dynamic_params": lr})
    params = {"dynamic_params": cloud.dynamic_params}
    losses = []
    for _ in range(steps):
        v = int(rng.integers(len(cameras)))
        out = renders[v]
        d = cloud.dynamic_params.astype(np.float64)
        payload = composite_payload(out, d[out.projected.index])
        loss, grad = bce_loss(sigmoid(payload), targets[v])
        losses.append(loss)
        rg = rasterize_backward(out, grad_payload=grad, payload_values=d[out.projected.index])
        g = np.zeros(len(cloud))
        g[out.projected.index] = rg.payload
        opt.step(params, {"dynamic_params": g})
    return losses
