"""Three-stage schedule: canonical fit, dynamic-parameter fit, joint spatio-temporal fit."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .decomposition import compute_masks, optimize_dynamic_params
from .deform import FeatureDecoder, deform, deform_backward
from .density import DensifyConfig, compute_importance, densify, prune
from .hashgrid import HashGrid4D
from .io import Dataset, srgb_to_linear
from .metrics import psnr, ssim_with_grad
from .optim import Adam
from .rasterizer import RasterSettings, render, render_backward
from .scene import GaussianCloud, SceneConfig, classify

log = logging.getLogger(__name__)

CLOUD_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


class ContractError(RuntimeError):
    pass


class StageIsolationError(AssertionError):
    pass


@dataclass
class TrainConfig:
    stage1_iters: int = 5000
    stage2_iters: int = 3000
    stage2_lr: float = 0.05
    stage3_iters: int = 14000
    hash_lr_init: float = 2e-3
    hash_lr_final: float = 2e-5
    lr_means: float = 1.6e-4  # multiplied by the scene extent
    lr_means_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_sh: float = 2.5e-3  # higher SH bands use lr_sh / 20
    lambda_ssim: float = 0.2
    lite: bool = False
    log2_hash_size: int = 19
    hash_levels: int = 16
    hash_features: int = 2
    hash_base_resolution: int = 16
    hash_finest_resolution: int = 512
    hash_time_scale: float = 1.0
    decoder_hidden: int = 64
    sh_degree: int = 1
    seed: int = 0
    gamma: float = 0.02
    zeta: float = 7.0
    prune_threshold: float = 0.02
    prune_interval: int = 3000
    importance_stride: int = 10
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 3500
    stage3_densify: bool = True
    stage3_densify_until: int = 7000
    min_opacity: float = 0.005
    max_points: int = 3000
    random_init_points: int = 2000
    log_interval: int = 100
    eval_interval: int = 1000
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.background = tuple(float(b) for b in self.background)
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must be in [0, 1]")
        for name in ("stage2_lr", "hash_lr_init", "hash_lr_final", "lr_means", "lr_means_final",
                     "lr_opacity", "lr_scales", "lr_rotations", "lr_sh"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("prune_interval", "importance_stride", "densify_interval", "log_interval",
                     "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        SceneConfig(zeta=self.zeta, gamma=self.gamma, sh_degree=self.sh_degree)

    def normalized(self) -> "TrainConfig":
        """Apply the Lite overrides: no SSIM term and 2^15-entry hash tables."""
        if self.lite:
            return replace(self, lambda_ssim=0.0, log2_hash_size=15)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


def exp_lr(k: int, total: int, lr0: float, lr_final: float) -> float:
    """lr0 * (lr_final / lr0) ** (k / total)."""
    if k <= 0:
        return lr0
    if k >= total:
        return lr_final
    return lr0 * (lr_final / lr0) ** (k / total)


def loss_rec(rendered, target, lambda_ssim: float):
    """(1 - lambda) * L1 + lambda * (1 - SSIM), with its gradient w.r.t. ``rendered``."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, g = ssim_with_grad(r, t)
        loss += lambda_ssim * (1.0 - s)
        grad -= lambda_ssim * g
    return loss, grad


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def param_hashes(cloud: GaussianCloud, grid: HashGrid4D | None, decoder: FeatureDecoder | None) -> dict:
    """SHA-256 per parameter group: cloud geometry/appearance, d, grid tables, decoder."""
    return {
        "cloud": _hash_arrays(getattr(cloud, n) for n in CLOUD_GROUPS),
        "d": _hash_arrays([cloud.dynamic_params]),
        "grid": _hash_arrays(grid.tables) if grid is not None else None,
        "decoder": _hash_arrays(decoder.params[k] for k in sorted(decoder.params)) if decoder else None,
    }


def scene_extent(cameras) -> float:
    """1.1 x the largest camera distance from the rig's mean center."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return 1.1 * max(radius, 1e-6)


def make_grid(config: TrainConfig, aabb=None) -> HashGrid4D:
    kwargs = {} if aabb is None else {"aabb": aabb}
    return HashGrid4D(n_levels=config.hash_levels, n_features=config.hash_features,
                      log2_size=config.log2_hash_size, base_resolution=config.hash_base_resolution,
                      finest_resolution=config.hash_finest_resolution,
                      time_scale=config.hash_time_scale, seed=config.seed + 1, **kwargs)


def make_decoder(config: TrainConfig, grid: HashGrid4D) -> FeatureDecoder:
    return FeatureDecoder(grid.output_dim, config.sh_degree, config.decoder_hidden,
                          config.decoder_hidden, seed=config.seed + 2)


def initial_cloud(dataset: Dataset, config: TrainConfig, rng) -> GaussianCloud:
    """Seed from the dataset's points, or uniformly inside the camera rig when absent."""
    if dataset.points is not None:
        xyz, rgb = dataset.points
        colors = None if rgb is None else srgb_to_linear(rgb / 255.0)
        return GaussianCloud.from_points(xyz, colors, config.sh_degree)
    half = scene_extent(dataset.cameras)
    xyz = rng.uniform(-half, half, size=(config.random_init_points, 3))
    return GaussianCloud.from_points(xyz, rng.uniform(0, 1, size=xyz.shape), config.sh_degree)


class Trainer:
    """Holds the model and runs the stages; each stage checks its isolation contract."""

    def __init__(self, dataset: Dataset, config: TrainConfig = TrainConfig(), holdout: int | None = None,
                 cloud: GaussianCloud | None = None, grid: HashGrid4D | None = None,
                 decoder: FeatureDecoder | None = None):
        self.config = config.normalized()
        self.dataset = dataset
        self.rng = np.random.default_rng(self.config.seed)
        self.train_idx, self.holdout_idx = dataset.split(holdout)
        if not self.train_idx:
            raise ContractError("no training cameras left after holding one out")
        self.cloud = cloud if cloud is not None else initial_cloud(dataset, self.config, self.rng)
        self.grid = grid if grid is not None else make_grid(self.config)
        self.decoder = decoder if decoder is not None else make_decoder(self.config, self.grid)
        self.extent = scene_extent(dataset.cameras)
        self.settings = RasterSettings()
        self.log: list[dict] = []
        self.stages_done: list[int] = []
        # source row (at stage start) of every current Gaussian, for the last stage run
        self.lineage: np.ndarray | None = None

    # -- helpers -----------------------------------------------------------

    @property
    def background(self):
        return self.config.background

    def _cloud_optimizer(self) -> Adam:
        c = self.config
        k = self.cloud.sh_coeffs.shape[1]
        sh_lr = np.full((1, k, 1), c.lr_sh / 20.0)
        sh_lr[0, 0, 0] = c.lr_sh
        return Adam({"means": c.lr_means * self.extent, "rotations": c.lr_rotations,
                     "log_scales": c.lr_scales, "opacity_logits": c.lr_opacity, "sh_coeffs": sh_lr})

    def _record(self, stage: int, iteration: int, loss: float, psnr_holdout=None) -> None:
        self.log.append({"iteration": iteration, "stage": stage, "loss": loss,
                         "psnr_holdout": psnr_holdout})

    def render_at(self, camera_index: int, t: float | None = None) -> np.ndarray:
        cam = self.dataset.cameras[camera_index]
        cloud = self.cloud
        if t is not None and self.cloud.classified:
            dyn = np.flatnonzero(self.cloud.dynamic_flags)
            cloud = deform(self.cloud, dyn, self.grid, self.decoder, t)[0]
        return render(cloud, cam, self.background, "color", self.settings, retain_records=False).color

    def evaluate_holdout(self, frames=None) -> float | None:
        """Mean PSNR of the held-out camera over ``frames`` (default: all frames)."""
        if self.holdout_idx is None:
            return None
        frames = range(self.dataset.n_frames) if frames is None else frames
        vals = [psnr(np.clip(self.render_at(self.holdout_idx, self.dataset.time_of(f)), 0, 1),
                     self.dataset.frames[self.holdout_idx, f]) for f in frames]
        return float(np.mean(vals))

    def _densify_step(self, opt: Adam, grad_accum, denom, lineage):
        c = self.config
        avg = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
        if len(self.cloud) >= c.max_points:
            avg[:] = 0.0
        cfg = DensifyConfig(c.densify_grad_threshold, c.percent_dense)
        self.cloud, parents = densify(self.cloud, avg, self.extent, cfg, self.rng, opt, CLOUD_GROUPS)
        lineage = lineage[parents]
        keep = np.flatnonzero(~(self.cloud.opacities < c.min_opacity))
        if len(keep) < len(self.cloud):
            for name in CLOUD_GROUPS:
                opt.remap_rows(name, keep)
            self.cloud = self.cloud.select(keep)
            lineage = lineage[keep]
        return lineage

    def _accumulate_screen_grads(self, out, rg, grad_accum, denom) -> None:
        # pixel-space gradient rescaled to normalized device coordinates
        cam = out.camera
        g = rg.mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
        idx = out.projected.index
        grad_accum[idx] += np.linalg.norm(g, axis=1)
        denom[idx] += 1

    def _check_d_lineage(self, d_start, lineage, stage):
        if not np.array_equal(self.cloud.dynamic_params, d_start[lineage]):
            raise StageIsolationError(f"stage {stage} modified the dynamic parameters")

    # -- stages ------------------------------------------------------------

    def stage1(self, iters: int | None = None) -> GaussianCloud:
        """Fit the canonical cloud to frame 0 of every training camera."""
        c = self.config
        iters = c.stage1_iters if iters is None else iters
        if self.dataset.n_frames < 1:
            raise ContractError("stage 1 needs frame-0 images")
        before = param_hashes(self.cloud, self.grid, self.decoder)
        d_start = self.cloud.dynamic_params.copy()
        lineage = np.arange(len(self.cloud))
        opt = self._cloud_optimizer()
        targets = {i: self.dataset.frames[i, 0] for i in self.train_idx}
        grad_accum, denom = np.zeros(len(self.cloud)), np.zeros(len(self.cloud))
        for it in range(1, iters + 1):
            opt.lrs["means"] = exp_lr(it - 1, iters, c.lr_means, c.lr_means_final) * self.extent
            v = self.train_idx[int(self.rng.integers(len(self.train_idx)))]
            out = render(self.cloud, self.dataset.cameras[v], self.background, "color", self.settings)
            loss, g_img = loss_rec(out.color, targets[v], c.lambda_ssim)
            grads, rg = render_backward(out, g_img)
            opt.step(self.cloud.params(), {k: grads[k] for k in CLOUD_GROUPS})
            self.cloud.normalize_rotations()
            if it <= c.densify_until:
                self._accumulate_screen_grads(out, rg, grad_accum, denom)
                if it >= c.densify_from and it % c.densify_interval == 0:
                    lineage = self._densify_step(opt, grad_accum, denom, lineage)
                    grad_accum, denom = np.zeros(len(self.cloud)), np.zeros(len(self.cloud))
            p = None
            if it % c.eval_interval == 0 or it == iters:
                p = self.evaluate_holdout([0])
            if it % c.log_interval == 0 or it == iters or p is not None:
                self._record(1, it, loss, p)
        after = param_hashes(self.cloud, self.grid, self.decoder)
        if after["grid"] != before["grid"] or after["decoder"] != before["decoder"]:
            raise StageIsolationError("stage 1 modified the grid or decoder")
        self._check_d_lineage(d_start, lineage, 1)
        self.lineage = lineage
        self.stages_done.append(1)
        return self.cloud

    def stage2(self, iters: int | None = None) -> GaussianCloud:
        """Fit d against temporal-variance masks of the training views; freeze the flags."""
        c = self.config
        iters = c.stage2_iters if iters is None else iters
        before = param_hashes(self.cloud, self.grid, self.decoder)
        masks = compute_masks(self.dataset.videos(self.train_idx), c.gamma)
        cams = [self.dataset.cameras[i] for i in self.train_idx]
        losses = optimize_dynamic_params(self.cloud, cams, masks, iters, c.stage2_lr,
                                         seed=int(self.rng.integers(2**31)), settings=self.settings,
                                         background=self.background)
        classify(self.cloud, c.zeta)
        for i in range(c.log_interval - 1, len(losses), c.log_interval):
            self._record(2, i + 1, losses[i])
        if len(losses) % c.log_interval:
            self._record(2, len(losses), losses[-1])
        after = param_hashes(self.cloud, self.grid, self.decoder)
        if any(after[k] != before[k] for k in ("cloud", "grid", "decoder")):
            raise StageIsolationError("stage 2 modified parameters other than d")
        self.lineage = np.arange(len(self.cloud))
        self.stages_done.append(2)
        return self.cloud

    def _fit_grid_bounds(self, dyn) -> None:
        if len(dyn) == 0:
            return
        pts = self.cloud.means[dyn].astype(np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = 0.1 * (hi - lo).max() + 0.05
        self.grid.aabb = np.stack([lo - pad, hi + pad])

    def stage3(self, iters: int | None = None) -> GaussianCloud:
        """Jointly fit the cloud, hash grid and decoder over all frames; d stays frozen."""
        c = self.config
        iters = c.stage3_iters if iters is None else iters
        if not self.cloud.classified:
            raise ContractError("stage 3 needs a classified cloud (run stage 2 first)")
        d_start = self.cloud.dynamic_params.copy()
        lineage = np.arange(len(self.cloud))
        dyn = np.flatnonzero(self.cloud.dynamic_flags)
        self._fit_grid_bounds(dyn)
        opt = self._cloud_optimizer()
        net_opt = Adam({k: c.hash_lr_init for k in self.decoder.params}
                       | {f"grid.{l}": c.hash_lr_init for l in range(self.grid.n_levels)})
        grid_params = {f"grid.{l}": t for l, t in enumerate(self.grid.tables)}
        grad_accum, denom = np.zeros(len(self.cloud)), np.zeros(len(self.cloud))
        n_frames = self.dataset.n_frames
        for it in range(1, iters + 1):
            lr = exp_lr(it - 1, iters, c.hash_lr_init, c.hash_lr_final)
            for k in net_opt.lrs:
                net_opt.lrs[k] = lr
            opt.lrs["means"] = exp_lr(it - 1, iters, c.lr_means, c.lr_means_final) * self.extent
            v = self.train_idx[int(self.rng.integers(len(self.train_idx)))]
            f = int(self.rng.integers(n_frames))
            t = self.dataset.time_of(f)
            deformed, dcache = deform(self.cloud, dyn, self.grid, self.decoder, t)
            out = render(deformed, self.dataset.cameras[v], self.background, "color", self.settings)
            loss, g_img = loss_rec(out.color, self.dataset.frames[v, f], c.lambda_ssim)
            grads, rg = render_backward(out, g_img)
            cgrads = deform_backward(dcache, self.grid, self.decoder, grads)
            opt.step(self.cloud.params(), {k: cgrads[k] for k in CLOUD_GROUPS})
            self.cloud.normalize_rotations()
            net_grads = dict(self.decoder.grads)
            sparse = {}
            for l in range(self.grid.n_levels):
                net_grads[f"grid.{l}"] = self.grid.grads[l]
                sparse[f"grid.{l}"] = self.grid.touched_indices(l)
            net_opt.step(self.decoder.params | grid_params, net_grads, sparse)
            self.decoder.zero_grad()
            self.grid.zero_grad()

            structural = False
            if c.stage3_densify and it <= c.stage3_densify_until:
                self._accumulate_screen_grads(out, rg, grad_accum, denom)
                if it >= c.densify_from and it % c.densify_interval == 0:
                    lineage = self._densify_step(opt, grad_accum, denom, lineage)
                    structural = True
            if it % c.prune_interval == 0 and it < iters:
                lineage = self._prune_step(opt, lineage)
                structural = True
            if structural:
                dyn = np.flatnonzero(self.cloud.dynamic_flags)
                grad_accum, denom = np.zeros(len(self.cloud)), np.zeros(len(self.cloud))
            p = None
            if it % c.eval_interval == 0 or it == iters:
                p = self.evaluate_holdout(None if it == iters else range(0, n_frames, 3))
            if it % c.log_interval == 0 or it == iters or p is not None:
                self._record(3, it, loss, p)
        self._check_d_lineage(d_start, lineage, 3)
        self.lineage = lineage
        self.stages_done.append(3)
        return self.cloud

    def importance(self, stride: int | None = None):
        c = self.config
        stride = c.importance_stride if stride is None else stride
        times = [self.dataset.time_of(f) for f in range(0, self.dataset.n_frames, stride)]
        cams = [self.dataset.cameras[i] for i in self.train_idx]
        grid = self.grid if self.cloud.classified else None
        return compute_importance(self.cloud, cams, times, grid, self.decoder, c.prune_threshold,
                                  self.settings, self.background)

    def _prune_step(self, opt: Adam, lineage):
        report = self.importance()
        self.cloud, keep = prune(self.cloud, report, optimizer=opt, names=CLOUD_GROUPS)
        return lineage[keep]

    def run(self, stages=(1, 2, 3)) -> GaussianCloud:
        for s in stages:
            {1: self.stage1, 2: self.stage2, 3: self.stage3}[s]()
        return self.cloud

    def metrics(self) -> dict:
        """Held-out PSNR/SSIM per frame and their means."""
        from .metrics import dssim, ssim

        if self.holdout_idx is None:
            return {"holdout": None}
        rows = []
        for f in range(self.dataset.n_frames):
            t = self.dataset.time_of(f)
            img = np.clip(self.render_at(self.holdout_idx, t), 0, 1)
            gt = self.dataset.frames[self.holdout_idx, f]
            rows.append({"frame": f, "psnr": psnr(img, gt), "ssim": ssim(img, gt), "dssim": dssim(img, gt)})
        return {"holdout": self.dataset.cameras[self.holdout_idx].camera_id, "frames": rows,
                **{f"mean_{k}": float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "dssim")}}
