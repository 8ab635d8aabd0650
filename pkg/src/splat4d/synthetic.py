"""Multi-view dynamic scenes with closed-form motion and exact ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .decomposition import compute_masks
from .io import Dataset, decode_srgb8, encode_srgb8, save_dataset, write_json_atomic, write_mask_png
from .rasterizer import RasterSettings, render
from .scene import Camera, GaussianCloud
from .sh import SH_C0, num_sh_coeffs

MOTIONS = ("static", "orbit", "translate", "pulse")


@dataclass
class SceneSpec:
    n_static: int = 200
    n_orbit: int = 50
    n_translate: int = 0
    n_pulse: int = 0
    n_cameras: int = 4
    n_frames: int = 30
    width: int = 128
    height: int = 128
    fov_degrees: float = 50.0
    camera_radius: float = 4.0
    camera_height: float = 0.4
    arc_degrees: float = 90.0
    amplitude: float = 0.2  # orbit radius / translation length, scene units
    dynamic_radius: float = 0.3
    plane_height: float = 1.2
    dynamic_scale: tuple = (0.03, 0.05)
    sh_degree: int = 1
    point_noise: float = 0.01
    mask_time_samples: int = 4  # analytic masks sample motion this many times denser than the frames
    occluded_camera: int | None = None  # add one static point hidden behind the moving cluster in this view
    occluded_depth: float = 1.5

    def validate(self) -> None:
        if self.n_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        counts = (self.n_static, self.n_orbit, self.n_translate, self.n_pulse)
        if min(counts) < 0 or sum(counts) == 0:
            raise ValueError("point counts must be non-negative and not all zero")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not 0 < self.fov_degrees < 180:
            raise ValueError("fov must be in (0, 180) degrees")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError("sh_degree must be 0..3")
        if self.mask_time_samples < 1:
            raise ValueError("mask_time_samples must be >= 1")
        if self.occluded_camera is not None and not 0 <= self.occluded_camera < self.n_cameras:
            raise ValueError("occluded_camera out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)


def quaternion_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    cloud: GaussianCloud  # ground truth at t = 0
    motions: np.ndarray  # per-point motion name
    directions: np.ndarray  # per-point unit translation direction
    cameras: list[Camera]
    frames: np.ndarray | None = None  # (C, T, H, W, 3), linear, 8-bit quantized
    occluded_index: int | None = None

    @property
    def dynamic_ids(self) -> np.ndarray:
        return np.flatnonzero(self.motions != "static")

    def params_at(self, t: float) -> GaussianCloud:
        """Ground-truth cloud at normalized time t in [0, 1] (float64 arrays)."""
        c = self.cloud
        out = GaussianCloud(
            c.means.astype(np.float64), c.rotations.astype(np.float64),
            c.log_scales.astype(np.float64), c.opacity_logits.astype(np.float64),
            c.sh_coeffs.astype(np.float64), c.dynamic_params.astype(np.float64),
        )
        orbit = self.motions == "orbit"
        if orbit.any():
            theta = 2.0 * np.pi * t
            ct, st = np.cos(theta), np.sin(theta)
            rot = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
            out.means[orbit] = out.means[orbit] @ rot.T
            q_rot = np.array([np.cos(theta / 2), 0.0, np.sin(theta / 2), 0.0])
            out.rotations[orbit] = quaternion_multiply(q_rot, out.rotations[orbit])
        trans = self.motions == "translate"
        if trans.any():
            out.means[trans] += self.spec.amplitude * t * self.directions[trans]
        pulse = self.motions == "pulse"
        if pulse.any():
            out.log_scales[pulse] += np.log1p(0.5 * np.sin(2.0 * np.pi * t))
        return out

    def render_frame(self, camera: Camera, t: float) -> np.ndarray:
        """Exact float render of the ground truth (before 8-bit quantization)."""
        return render(self.params_at(t), camera, (0.0, 0.0, 0.0), "color", RasterSettings(),
                      retain_records=False).color

    def analytic_masks(self, gamma: float = 0.02) -> list[np.ndarray]:
        """Motion-region masks from unquantized renders sampled densely in time."""
        n = (self.spec.n_frames - 1) * self.spec.mask_time_samples + 1
        times = np.linspace(0.0, 1.0, n)
        videos = [np.stack([self.render_frame(cam, t) for t in times]) for cam in self.cameras]
        return compute_masks(videos, gamma).masks

    def labels(self) -> dict:
        return {
            "n_points": len(self.motions),
            "dynamic": self.dynamic_ids.tolist(),
            "motion": self.motions.tolist(),
            "occluded_static": self.occluded_index,
        }

    def points(self, rng=None):
        """Noisy ground-truth positions with 8-bit colors, for seeding reconstruction."""
        rng = np.random.default_rng(self.seed + 1) if rng is None else rng
        xyz = self.cloud.means.astype(np.float64) + rng.normal(scale=self.spec.point_noise,
                                                               size=self.cloud.means.shape)
        rgb = self.cloud.sh_coeffs[:, 0, :].astype(np.float64) * SH_C0 + 0.5
        return xyz.astype(np.float32), encode_srgb8(rgb)

    def to_dataset(self) -> Dataset:
        return Dataset(self.cameras, self.frames, self.points(), self.labels())


def make_cameras(spec: SceneSpec) -> list[Camera]:
    angles = np.deg2rad(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, spec.n_cameras))
    cams = []
    for i, a in enumerate(angles):
        eye = np.array([spec.camera_radius * np.sin(a), spec.camera_height, spec.camera_radius * np.cos(a)])
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                                   spec.width, spec.height, spec.fov_degrees, camera_id=i))
    return cams


def build_cloud(spec: SceneSpec, rng, cameras) -> tuple[GaussianCloud, np.ndarray, np.ndarray, int | None]:
    k = num_sh_coeffs(spec.sh_degree)
    n_dyn = spec.n_orbit + spec.n_translate + spec.n_pulse

    # static points tile a floor and a ceiling plane, clear of the moving region
    static = np.column_stack([
        rng.uniform(-1.6, 1.6, spec.n_static),
        np.where(rng.random(spec.n_static) < 0.5, -1.0, 1.0) * spec.plane_height
        + rng.uniform(-0.02, 0.02, spec.n_static),
        rng.uniform(-1.2, 1.2, spec.n_static),
    ])
    # moving points fill a ball offset from the vertical orbit axis
    r = spec.dynamic_radius * rng.random(n_dyn) ** (1 / 3)
    dirs = rng.normal(size=(n_dyn, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offsets = dirs * r[:, None]
    dynamic = np.array([spec.amplitude, 0.0, 0.0]) + offsets
    means = np.concatenate([static, dynamic])
    motions = np.array(["static"] * spec.n_static + ["orbit"] * spec.n_orbit
                       + ["translate"] * spec.n_translate + ["pulse"] * spec.n_pulse)
    n = len(means)
    # flat splats lying in the planes; round splats for the moving cluster
    static_scales = np.column_stack([rng.uniform(0.10, 0.16, spec.n_static), np.full(spec.n_static, 0.02),
                                     rng.uniform(0.10, 0.16, spec.n_static)])
    log_scales = np.log(np.concatenate([static_scales, rng.uniform(*spec.dynamic_scale, size=(n_dyn, 3))]))
    yaw = rng.uniform(0, np.pi, spec.n_static)
    static_rot = np.column_stack([np.cos(yaw), np.zeros_like(yaw), np.sin(yaw), np.zeros_like(yaw)])
    rotations = np.concatenate([static_rot, _random_quaternions(rng, n_dyn)])
    opacity = rng.uniform(0.7, 0.95, size=n)
    # colors vary smoothly with position, like surface texture
    phase = rng.uniform(0, 2 * np.pi, 3)
    colors = np.concatenate([
        0.5 + 0.3 * np.sin(1.7 * static[:, [0]] + 1.3 * static[:, [2]] * np.array([1.0, -1.0, 0.5]) + phase),
        np.clip(0.6 + 0.35 * offsets / spec.dynamic_radius, 0.1, 0.95),
    ])
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.02, size=(n, k - 1, 3))
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    occluded = None
    if spec.occluded_camera is not None:
        cam = cameras[spec.occluded_camera]
        center = np.array([spec.amplitude, 0.0, 0.0])
        ray = center - cam.center
        p = center + spec.occluded_depth * ray / np.linalg.norm(ray)
        occluded = n
        means = np.concatenate([means, p[None]])
        motions = np.append(motions, "static")
        log_scales = np.concatenate([log_scales, np.full((1, 3), np.log(0.06))])
        rotations = np.concatenate([rotations, [[1.0, 0, 0, 0]]])
        opacity = np.append(opacity, 0.9)
        sh = np.concatenate([sh, np.zeros((1, k, 3))])
        sh[-1, 0, :] = (np.array([0.9, 0.9, 0.2]) - 0.5) / SH_C0
        directions = np.concatenate([directions, [[1.0, 0, 0]]])

    f32 = np.float32
    cloud = GaussianCloud(means.astype(f32), rotations.astype(f32), log_scales.astype(f32),
                          np.log(opacity / (1 - opacity)).astype(f32), sh.astype(f32),
                          np.zeros(len(means), f32))
    return cloud, motions, directions, occluded


def generate(spec: SceneSpec = SceneSpec(), seed: int = 0, out_dir=None) -> SyntheticScene:
    """Build and render a scene; optionally write the dataset layout to ``out_dir``.

    Frames are quantized to 8-bit sRGB and decoded back, so the in-memory frames
    equal what a reader of the written dataset sees.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    cameras = make_cameras(spec)
    cloud, motions, directions, occluded = build_cloud(spec, rng, cameras)
    scene = SyntheticScene(spec, seed, cloud, motions, directions, cameras, occluded_index=occluded)
    times = np.arange(spec.n_frames) / (spec.n_frames - 1)
    frames = np.zeros((len(cameras), spec.n_frames, spec.height, spec.width, 3), dtype=np.float32)
    for c, cam in enumerate(cameras):
        for f, t in enumerate(times):
            frames[c, f] = decode_srgb8(encode_srgb8(scene.render_frame(cam, t)))
    scene.frames = frames
    if out_dir is not None:
        write_scene(scene, out_dir)
    return scene


def write_scene(scene: SyntheticScene, out_dir, gamma: float = 0.02) -> None:
    out = Path(out_dir)
    save_dataset(out, scene.cameras, scene.frames, scene.points(), scene.labels())
    for cam, mask in zip(scene.cameras, scene.analytic_masks(gamma)):
        write_mask_png(out / "gt_masks" / f"{cam.camera_id}.png", mask)
    write_json_atomic(out / "scene.json", {"spec": asdict(scene.spec), "seed": scene.seed})


def load_spec(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))
