"""Canonical-space Gaussian cloud, cameras and scene configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from .sh import SH_C0, num_sh_coeffs


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    zeta: float = 7.0  # dynamic threshold on d
    gamma: float = 0.02  # temporal-std mask threshold
    sh_degree: int = 1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.2
    far: float = 100.0

    def __post_init__(self):
        if not np.isfinite(self.zeta):
            raise InvalidParameterError("zeta must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidParameterError("gamma must lie in (0, 1)")
        if self.sh_degree not in (0, 1, 2, 3):
            raise InvalidParameterError("sh_degree must be 0..3")
        if not 0.0 < self.near < self.far:
            raise InvalidParameterError("need 0 < near < far")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform (OpenCV axes: x right, y down, z forward)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    camera_id: int = 0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self) -> None:
        R = self.R
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5:
            raise InvalidParameterError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point outside the image")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg, camera_id=0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        # image y points down, so "down" is -up projected off the viewing axis
        down = -np.asarray(up, dtype=np.float64)
        down = down - forward * (down @ forward)
        down /= np.linalg.norm(down)
        right = np.cross(down, forward)
        R = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        fx = width / (2.0 * np.tan(np.radians(fov_x_deg) / 2.0))
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, w2c, camera_id)

    def to_dict(self) -> dict:
        return {
            "id": int(self.camera_id),
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "world_to_camera": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
            float(d["cx"]), float(d["cy"]), np.array(d["world_to_camera"], dtype=np.float64),
            int(d.get("id", 0)),
        )


PARAM_FIELDS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "dynamic_params")


@dataclass
class GaussianCloud:
    """Columnar store of per-Gaussian parameters.

    Scales live in log space and opacities as logits; ``sh_coeffs`` has shape
    (N, (degree+1)**2, 3). ``dynamic_flags`` caches ``dynamic_params > zeta`` once
    :func:`classify` has run.
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    dynamic_params: np.ndarray
    dynamic_flags: np.ndarray = field(default=None)
    classified: bool = False

    def __post_init__(self):
        n = len(self.means)
        if self.dynamic_flags is None:
            self.dynamic_flags = np.zeros(n, dtype=bool)
        shapes = {
            "means": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
            "opacity_logits": (n,), "dynamic_params": (n,), "dynamic_flags": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidParameterError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError("sh_coeffs must have shape (N, K, 3)")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @classmethod
    def empty(cls, sh_degree: int = 1, dtype=np.float32) -> "GaussianCloud":
        k = num_sh_coeffs(sh_degree)
        return cls(
            np.zeros((0, 3), dtype), np.zeros((0, 4), dtype), np.zeros((0, 3), dtype),
            np.zeros(0, dtype), np.zeros((0, k, 3), dtype), np.zeros(0, dtype),
        )

    @classmethod
    def from_points(cls, xyz, rgb=None, sh_degree=1, opacity=0.1, dtype=np.float32) -> "GaussianCloud":
        """Seed a cloud from points, sizing each Gaussian by its 3 nearest neighbours."""
        xyz = np.asarray(xyz, dtype=np.float64)
        n = len(xyz)
        if rgb is None:
            rgb = np.full((n, 3), 0.5)
        k = min(4, n)
        if n > 1:
            dist, _ = cKDTree(xyz).query(xyz, k=k)
            d2 = np.maximum((dist[:, 1:] ** 2).mean(axis=1), 1e-7)
        else:
            d2 = np.full(n, 1e-2)
        log_scales = np.repeat(np.log(np.sqrt(d2))[:, None], 3, axis=1)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
        sh[:, 0, :] = (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
        logit = np.log(opacity / (1.0 - opacity))
        return cls(
            xyz.astype(dtype), rotations.astype(dtype), log_scales.astype(dtype),
            np.full(n, logit, dtype), sh.astype(dtype), np.zeros(n, dtype),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "GaussianCloud":
        return replace(self, **{f.name: getattr(self, f.name).copy()
                                for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)})

    def select(self, index) -> "GaussianCloud":
        """Row subset (boolean mask or index array); returns a new cloud."""
        return replace(self, **{f.name: getattr(self, f.name)[index]
                                for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        arrays = {f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                  for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}
        return replace(self, **arrays)

    def normalize_rotations(self) -> None:
        norm = np.linalg.norm(self.rotations.astype(np.float64), axis=1, keepdims=True)
        self.rotations[...] = self.rotations / np.maximum(norm, 1e-12)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), normalized internally, to (..., 3, 3) matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_grad_to_quaternion(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR (..., 3, 3) back to the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    G = dR
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * (qn * dqn).sum(-1, keepdims=True)) / norm


def covariance3d(rotation, log_scale) -> np.ndarray:
    """R diag(exp(s))^2 R^T for one Gaussian or a batch."""
    rotation = np.asarray(rotation, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(log_scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    R = quaternion_to_rotation(rotation)
    M = R * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def classify(cloud: GaussianCloud, zeta: float = 7.0) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (dynamic, static) by the strict predicate d > zeta."""
    flags = np.asarray(cloud.dynamic_params, dtype=np.float64) > zeta
    cloud.dynamic_flags = flags
    cloud.classified = True
    return np.flatnonzero(flags), np.flatnonzero(~flags)
