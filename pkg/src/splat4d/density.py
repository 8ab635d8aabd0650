"""Temporal importance pruning and clone/split densification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import deform
from .rasterizer import RasterSettings, render
from .scene import GaussianCloud, quaternion_to_rotation


class StaleReportError(ValueError):
    pass


@dataclass
class ImportanceReport:
    weights: np.ndarray  # per-Gaussian max blending weight, in [0, 1]
    camera_ids: list[int]
    times: list[float]
    threshold: float
    pruned: np.ndarray

    def to_json(self) -> dict:
        pruned = np.zeros(len(self.weights), dtype=bool)
        pruned[self.pruned] = True
        return {
            "threshold": self.threshold,
            "camera_ids": list(self.camera_ids),
            "times": [float(t) for t in self.times],
            "points": [{"index": i, "w": float(w), "pruned": bool(p)}
                       for i, (w, p) in enumerate(zip(self.weights, pruned))],
        }


def compute_importance(cloud: GaussianCloud, cameras, times, grid=None, decoder=None,
                       threshold: float = 0.02, settings: RasterSettings = RasterSettings(),
                       background=(0.0, 0.0, 0.0)) -> ImportanceReport:
    """w_i = max over (view, pixel, time) of alpha_i * prod_{j<i}(1 - alpha_j).

    Dynamic points are deformed to each query time when a grid and decoder are
    given; otherwise the cloud is rendered as is.
    """
    cameras = list(cameras)
    times = list(times)
    if not cameras or not times:
        raise ValueError("importance needs at least one camera and one time")
    w = np.zeros(len(cloud))
    dyn = np.flatnonzero(cloud.dynamic_flags)
    animate = grid is not None and decoder is not None and len(dyn) > 0
    for cam in cameras:
        for t in (times if animate else times[:1]):
            scene = deform(cloud, dyn, grid, decoder, t)[0] if animate else cloud
            out = render(scene, cam, background, "color", settings)
            np.maximum.at(w, out.projected.index[out.rec_gid], out.record_weights())
    return ImportanceReport(w, [c.camera_id for c in cameras], times, threshold,
                            np.flatnonzero(w < threshold))


def prune(cloud: GaussianCloud, report: ImportanceReport, threshold: float | None = None,
          optimizer=None, names=None) -> tuple[GaussianCloud, np.ndarray]:
    """Drop Gaussians with w < threshold. Returns (cloud, kept source indices)."""
    if len(report.weights) != len(cloud):
        raise StaleReportError(f"report covers {len(report.weights)} points, cloud has {len(cloud)}")
    thr = report.threshold if threshold is None else threshold
    keep = np.flatnonzero(~(report.weights < thr))
    if optimizer is not None:
        for name in names or ():
            optimizer.remap_rows(name, keep)
    return cloud.select(keep), keep


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_children: int = 2
    split_scale_divisor: float = 1.6


def densify(cloud: GaussianCloud, grad_norms: np.ndarray, scene_extent: float,
            config: DensifyConfig = DensifyConfig(), rng=None, optimizer=None,
            names=None) -> tuple[GaussianCloud, np.ndarray]:
    """Clone small and split large high-gradient Gaussians.

    Clones are exact copies (the next optimizer step separates them); split
    children are sampled inside the parent footprint with scales divided by 1.6
    and the parent is removed. Every child copies its parent's d and dynamic
    flag. Returns (cloud, parent index per output row).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    selected = grad_norms >= config.grad_threshold
    big = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1) > config.percent_dense * scene_extent
    clone_idx = np.flatnonzero(selected & ~big)
    split_idx = np.flatnonzero(selected & big)
    if len(clone_idx) == 0 and len(split_idx) == 0:
        return cloud, np.arange(len(cloud))

    keep_idx = np.setdiff1d(np.arange(len(cloud)), split_idx)
    k = config.split_children
    child_parent = np.repeat(split_idx, k)
    children = cloud.select(child_parent)
    if len(child_parent):
        scales = np.exp(cloud.log_scales[child_parent].astype(np.float64))
        R = quaternion_to_rotation(cloud.rotations[child_parent])
        offsets = rng.normal(size=scales.shape) * scales
        children.means[...] = cloud.means[child_parent] + np.einsum("nij,nj->ni", R, offsets)
        children.log_scales[...] = np.log(scales / config.split_scale_divisor)
    parents = np.concatenate([keep_idx, clone_idx, child_parent])
    out = cloud.select(keep_idx).concat(cloud.select(clone_idx)).concat(children)
    if optimizer is not None:
        remap = np.concatenate([keep_idx, -np.ones(len(clone_idx) + len(child_parent), dtype=np.int64)])
        for name in names or ():
            optimizer.remap_rows(name, remap)
    return out, parents
