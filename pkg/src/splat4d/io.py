"""On-disk formats: checkpoints, PLY point clouds, sRGB PNG frames, f32 tensor sidecars, datasets."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .deform import FeatureDecoder
from .hashgrid import HashGrid4D
from .scene import PARAM_FIELDS, Camera, GaussianCloud

CHECKPOINT_MAGIC = b"SW4D"
CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"SW4T"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class DatasetError(ValueError):
    pass


# -- atomic writes ---------------------------------------------------------

@contextmanager
def atomic_path(path):
    """Yield a temp path in the target directory; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_json_atomic(path, obj) -> None:
    write_bytes_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# -- checkpoints -----------------------------------------------------------

def _checkpoint_arrays(cloud, grid, decoder):
    arrays = [(f"cloud.{name}", getattr(cloud, name)) for name in PARAM_FIELDS]
    if grid is not None:
        arrays += [(f"grid.{level}", t) for level, t in enumerate(grid.tables)]
    if decoder is not None:
        arrays += [(f"decoder.{name}", p) for name, p in decoder.params.items()]
    return arrays


def checkpoint_bytes(cloud: GaussianCloud, grid: HashGrid4D | None = None,
                     decoder: FeatureDecoder | None = None, extra: dict | None = None) -> bytes:
    blobs, entries, offset = [], [], 0
    for name, arr in _checkpoint_arrays(cloud, grid, decoder):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arrays": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "cloud": {"classified": bool(cloud.classified), "sh_degree": cloud.sh_degree},
        "grid": None if grid is None else {
            "n_levels": grid.n_levels, "n_features": grid.n_features, "log2_size": grid.log2_size,
            "base_resolution": grid.base_resolution, "finest_resolution": grid.finest_resolution,
            "time_scale": grid.time_scale, "aabb": grid.aabb.tolist(),
            "time_range": list(grid.time_range)},
        "decoder": None if decoder is None else decoder.config(),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload


def save_checkpoint(path, cloud: GaussianCloud, grid: HashGrid4D | None = None,
                    decoder: FeatureDecoder | None = None, extra: dict | None = None) -> None:
    write_bytes_atomic(path, checkpoint_bytes(cloud, grid, decoder, extra))


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    grid: HashGrid4D | None
    decoder: FeatureDecoder | None
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.cloud, self.grid, self.decoder))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    if len(data) < 16:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    version, head_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 16 + head_len:
        raise CheckpointTruncatedError("checkpoint manifest is truncated")
    try:
        manifest = json.loads(data[16:16 + head_len])
    except ValueError as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    payload = data[16 + head_len:]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"checkpoint is truncated: payload has {len(payload)} bytes, expected {manifest['payload_bytes']}")
    if len(payload) > manifest["payload_bytes"]:
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointChecksumError("checkpoint payload checksum mismatch")

    arrays = {}
    for e in manifest["arrays"]:
        raw = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = raw.astype(np.float32).reshape(e["shape"])
    meta = manifest["cloud"]
    cloud = GaussianCloud(*(arrays[f"cloud.{n}"] for n in PARAM_FIELDS))
    zeta = manifest["extra"].get("zeta", 7.0)
    if meta["classified"]:
        cloud.classified = True
        cloud.dynamic_flags = cloud.dynamic_params > zeta
    grid = None
    if manifest["grid"] is not None:
        g = dict(manifest["grid"])
        tables = [arrays[f"grid.{i}"] for i in range(g["n_levels"])]
        grid = HashGrid4D(**{**g, "time_range": tuple(g["time_range"])}, tables=tables)
    decoder = None
    if manifest["decoder"] is not None:
        decoder = FeatureDecoder(**manifest["decoder"])
        for name in decoder.params:
            decoder.params[name] = arrays[f"decoder.{name}"]
    return Checkpoint(cloud, grid, decoder, manifest["extra"])


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return parse_checkpoint(data)


# -- PLY -------------------------------------------------------------------

_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1",
              "uint8": "u1", "char": "i1", "int8": "i1", "short": "i2", "int16": "i2",
              "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4"}


def write_ply(path, xyz, rgb=None, binary: bool = True) -> None:
    """Write points (and optional 0-255 colors) as binary little-endian or ASCII PLY."""
    xyz = np.asarray(xyz, dtype=np.float32)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if rgb is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(xyz), dtype=fields)
    rec["x"], rec["y"], rec["z"] = xyz.T
    if rgb is not None:
        rgb = np.asarray(rgb)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0", f"element vertex {len(xyz)}"]
    header += [f"property float {n}" for n in "xyz"]
    if rgb is not None:
        header += [f"property uchar {n}" for n in ("red", "green", "blue")]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode()
    if binary:
        body = rec.tobytes()
    else:
        lines = []
        for r in rec:
            vals = [repr(float(r[n])) for n in "xyz"]
            if rgb is not None:
                vals += [str(int(r[n])) for n in ("red", "green", "blue")]
            lines.append(" ".join(vals))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode()
    write_bytes_atomic(path, head + body)


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read x, y, z (required) and red, green, blue (optional) from a vertex element."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, n_vertex, props, in_vertex = None, 0, [], False
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
            elif n_vertex == 0:
                raise DatasetError(f"{path}: vertex must be the first element")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DatasetError(f"{path}: list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise DatasetError(f"{path}: vertex element needs x, y, z")
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(data) - body_start < dtype.itemsize * n_vertex:
            raise DatasetError(f"{path}: truncated vertex data")
        rec = np.frombuffer(data, dtype=dtype, count=n_vertex, offset=body_start)
        cols = {n: rec[n].astype(np.float64) for n in names}
    elif fmt == "ascii":
        rows = data[body_start:].decode("ascii").split()
        vals = np.array(rows[: n_vertex * len(props)], dtype=np.float64).reshape(n_vertex, len(props))
        cols = {n: vals[:, i] for i, n in enumerate(names)}
    else:
        raise DatasetError(f"{path}: unsupported PLY format {fmt!r}")
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    rgb = None
    if {"red", "green", "blue"} <= set(names):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    return xyz, rgb


# -- images ----------------------------------------------------------------

def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


_DECODE_LUT = srgb_to_linear(np.arange(256) / 255.0).astype(np.float32)


def encode_srgb8(linear) -> np.ndarray:
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def decode_srgb8(img8) -> np.ndarray:
    return _DECODE_LUT[np.asarray(img8, dtype=np.uint8)]


def write_png(path, linear_rgb) -> None:
    with atomic_path(path) as tmp:
        Image.fromarray(encode_srgb8(linear_rgb), mode="RGB").save(tmp, format="PNG")


def read_png(path) -> np.ndarray:
    """Load an 8-bit sRGB PNG as linear float32 RGB."""
    with Image.open(path) as im:
        return decode_srgb8(np.asarray(im.convert("RGB")))


def write_mask_png(path, mask) -> None:
    with atomic_path(path) as tmp:
        Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(tmp, format="PNG")


def write_gray_png(path, values) -> None:
    """Values in [0, 1] as an 8-bit grayscale PNG (no gamma)."""
    img = np.round(np.clip(np.asarray(values, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    with atomic_path(path) as tmp:
        Image.fromarray(img, mode="L").save(tmp, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


# -- f32 tensor sidecar ----------------------------------------------------

def tensor_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def write_tensor(path, arr) -> None:
    write_bytes_atomic(path, tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    (ndim,) = struct.unpack("<I", data[4:8])
    shape = struct.unpack(f"<{ndim}I", data[8:8 + 4 * ndim])
    body = data[8 + 4 * ndim:]
    count = int(np.prod(shape))
    if len(body) != 4 * count:
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(shape)


# -- datasets --------------------------------------------------------------

def frame_path(root, camera_id: int, frame: int) -> Path:
    return Path(root) / "views" / str(camera_id) / f"frame_{frame:05d}.png"


@dataclass
class Dataset:
    """Multi-view video: ``frames[c, f]`` is linear RGB of camera c at frame f."""

    cameras: list[Camera]
    frames: np.ndarray  # (C, T, H, W, 3) float32 linear
    points: tuple[np.ndarray, np.ndarray | None] | None = None
    labels: dict | None = None
    root: Path | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def time_of(self, frame: int) -> float:
        return frame / (self.n_frames - 1) if self.n_frames > 1 else 0.0

    def camera_index(self, camera_id: int) -> int:
        for i, cam in enumerate(self.cameras):
            if cam.camera_id == camera_id:
                return i
        raise DatasetError(f"unknown camera id {camera_id}")

    def split(self, holdout: int | None):
        """(train camera indices, holdout camera index or None)."""
        if holdout is None:
            return list(range(len(self.cameras))), None
        h = self.camera_index(holdout)
        return [i for i in range(len(self.cameras)) if i != h], h

    def videos(self, indices=None):
        indices = range(len(self.cameras)) if indices is None else indices
        return [self.frames[i] for i in indices]


def save_dataset(root, cameras, frames, points=None, labels=None) -> None:
    root = Path(root)
    write_json_atomic(root / "cameras.json", [c.to_dict() for c in cameras])
    for c, cam in enumerate(cameras):
        for f in range(frames.shape[1]):
            write_png(frame_path(root, cam.camera_id, f), frames[c, f])
    if points is not None:
        write_ply(root / "points.ply", *points)
    if labels is not None:
        write_json_atomic(root / "labels.json", labels)


def load_dataset(root) -> Dataset:
    root = Path(root)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DatasetError(f"{root}: missing cameras.json")
    cameras = [Camera.from_dict(d) for d in json.loads(cam_file.read_text())]
    if not cameras:
        raise DatasetError(f"{root}: no cameras")
    videos = []
    for cam in cameras:
        files = sorted((root / "views" / str(cam.camera_id)).glob("frame_*.png"))
        if not files:
            raise DatasetError(f"{root}: camera {cam.camera_id} has no frames")
        expected = [frame_path(root, cam.camera_id, i).name for i in range(len(files))]
        if [f.name for f in files] != expected:
            raise DatasetError(f"{root}: camera {cam.camera_id} frames are not contiguous from 0")
        video = np.stack([read_png(f) for f in files])
        if video.shape[1:3] != (cam.height, cam.width):
            raise DatasetError(f"{root}: camera {cam.camera_id} frame size does not match cameras.json")
        videos.append(video)
    if len({len(v) for v in videos}) != 1:
        raise DatasetError(f"{root}: cameras have different frame counts")
    if len({v.shape[1:] for v in videos}) != 1:
        raise DatasetError(f"{root}: cameras have different image sizes")
    points = read_ply(root / "points.ply") if (root / "points.ply").exists() else None
    labels = json.loads((root / "labels.json").read_text()) if (root / "labels.json").exists() else None
    return Dataset(cameras, np.stack(videos), points, labels, root)
