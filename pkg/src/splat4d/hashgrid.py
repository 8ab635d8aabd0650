"""4D multi-resolution hash encoding over (x, y, z, t)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numba import njit

PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)
# the 16 corners of a 4D cell as 0/1 offsets, shape (16, 4)
CORNERS = np.array(list(itertools.product((0, 1), repeat=4)), dtype=np.int64)[:, ::-1].copy()


@njit(cache=True)
def _corner_index(coord, res, dense, table_size):
    if dense:
        return coord[0] + (res[0] + 1) * (coord[1] + (res[1] + 1) * (coord[2] + (res[2] + 1) * coord[3]))
    mask32 = np.uint64(0xFFFFFFFF)
    h = np.uint64(0)
    for a in range(4):
        h ^= (np.uint64(coord[a]) * PRIMES[a]) & mask32
    return np.int64(h & np.uint64(table_size - 1))


@njit(cache=True)
def _cell(u_row, res, base, frac):
    for a in range(4):
        s = u_row[a] * res[a]
        b = min(np.int64(np.floor(s)), res[a] - 1)
        base[a] = b
        frac[a] = s - b


@njit(cache=True)
def _encode_level(u, res, dense, table_size, table, out, col):
    n, F = u.shape[0], table.shape[1]
    base = np.empty(4, np.int64)
    frac = np.empty(4)
    coord = np.empty(4, np.int64)
    for i in range(n):
        _cell(u[i], res, base, frac)
        for f in range(F):
            out[i, col + f] = 0.0
        for c in range(16):
            w = 1.0
            for a in range(4):
                bit = (c >> a) & 1
                coord[a] = base[a] + bit
                w *= frac[a] if bit else 1.0 - frac[a]
            idx = _corner_index(coord, res, dense, table_size)
            for f in range(F):
                out[i, col + f] += w * np.float64(table[idx, f])


@njit(cache=True)
def _encode_level_backward(u, res, dense, table_size, table, g, grads, touched, d_u):
    # accumulates table gradients sequentially (deterministic) and d out / d u
    n, F = u.shape[0], table.shape[1]
    base = np.empty(4, np.int64)
    frac = np.empty(4)
    coord = np.empty(4, np.int64)
    wa = np.empty(4)
    for i in range(n):
        _cell(u[i], res, base, frac)
        for c in range(16):
            w = 1.0
            for a in range(4):
                bit = (c >> a) & 1
                coord[a] = base[a] + bit
                wa[a] = frac[a] if bit else 1.0 - frac[a]
                w *= wa[a]
            idx = _corner_index(coord, res, dense, table_size)
            touched[i * 16 + c] = idx
            gf = 0.0
            for f in range(F):
                grads[idx, f] += w * g[i, f]
                gf += np.float64(table[idx, f]) * g[i, f]
            for a in range(4):
                others = 1.0
                for b in range(4):
                    if b != a:
                        others *= wa[b]
                sign = 1.0 if (c >> a) & 1 else -1.0
                d_u[i, a] += gf * others * sign * res[a]


@dataclass
class HashGrid4D:
    n_levels: int = 16
    n_features: int = 2
    log2_size: int = 19
    base_resolution: int = 16
    finest_resolution: int = 512
    time_scale: float = 1.0
    aabb: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))
    time_range: tuple[float, float] = (0.0, 1.0)
    dtype: type = np.float32
    seed: int = 0
    init_range: float = 1e-4
    tables: list = field(default=None, repr=False)
    grads: list = field(default=None, repr=False)
    touched: list = field(default=None, repr=False)

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if self.n_levels > 1:
            growth = np.exp(np.log(self.finest_resolution / self.base_resolution) / (self.n_levels - 1))
        else:
            growth = 1.0
        res = np.floor(self.base_resolution * growth ** np.arange(self.n_levels) + 1e-9).astype(np.int64)
        if np.any(np.diff(res) <= 0):
            raise ValueError(f"level resolutions must strictly increase, got {res.tolist()}")
        self.resolutions = res
        self.time_resolutions = np.maximum(1, np.floor(res * self.time_scale + 1e-9)).astype(np.int64)
        self.table_size = 1 << self.log2_size
        dense = (res + 1) ** 3 * (self.time_resolutions + 1)
        self.dense = dense <= self.table_size
        self.level_sizes = np.where(self.dense, dense, self.table_size)
        if self.tables is None:
            rng = np.random.default_rng(self.seed)
            self.tables = [rng.uniform(-self.init_range, self.init_range, (int(s), self.n_features))
                           .astype(self.dtype) for s in self.level_sizes]
        self.zero_grad()

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features

    def zero_grad(self) -> None:
        if self.grads is None:
            self.grads = [np.zeros(t.shape) for t in self.tables]
        elif self.touched is not None:
            for g, idx in zip(self.grads, self.touched):
                if idx is not None:
                    g[idx] = 0.0
        self.touched = [None] * self.n_levels

    def normalize(self, positions, times):
        """Map (positions, times) into [0, 1]^4 with clamping; returns (coords, in_range mask)."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        t = np.broadcast_to(np.asarray(times, dtype=np.float64), (len(positions),))
        lo, hi = self.aabb
        t0, t1 = self.time_range
        u = np.empty((len(positions), 4))
        u[:, :3] = (positions - lo) / (hi - lo)
        u[:, 3] = (t - t0) / (t1 - t0)
        inside = (u >= 0.0) & (u <= 1.0)
        return np.clip(u, 0.0, 1.0), inside

    def _level_lookup(self, level: int, u: np.ndarray):
        """Corner table indices (N, 16), weights (N, 16) and fractional coords (N, 4)."""
        res = np.array([self.resolutions[level]] * 3 + [self.time_resolutions[level]], dtype=np.int64)
        scaled = u * res
        base = np.minimum(np.floor(scaled).astype(np.int64), res - 1)
        frac = scaled - base
        coords = base[:, None, :] + CORNERS[None]
        w_axis = np.where(CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        weights = w_axis.prod(axis=2)
        if self.dense[level]:
            stride = res + 1
            idx = (coords[..., 0] + stride[0] * (coords[..., 1] + stride[1] * (coords[..., 2]
                   + stride[2] * coords[..., 3])))
        else:
            h = (coords.astype(np.uint64) * PRIMES) & np.uint64(0xFFFFFFFF)
            idx = (h[..., 0] ^ h[..., 1] ^ h[..., 2] ^ h[..., 3]) & np.uint64(self.table_size - 1)
            idx = idx.astype(np.int64)
        return idx, weights, frac, w_axis

    def _res(self, level: int) -> np.ndarray:
        return np.array([self.resolutions[level]] * 3 + [self.time_resolutions[level]], dtype=np.int64)

    def encode(self, positions, times) -> np.ndarray:
        """Concatenated per-level interpolated features, shape (N, L*F)."""
        u, _ = self.normalize(positions, times)
        out = np.empty((len(u), self.n_levels * self.n_features))
        for level in range(self.n_levels):
            _encode_level(u, self._res(level), bool(self.dense[level]), self.table_size,
                          self.tables[level], out, level * self.n_features)
        return out

    def encode_backward(self, positions, times, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate table gradients; return d loss / d positions (N, 3)."""
        u, inside = self.normalize(positions, times)
        grad_out = np.asarray(grad_out, dtype=np.float64).reshape(len(u), self.output_dim)
        F = self.n_features
        d_u = np.zeros((len(u), 4))
        for level in range(self.n_levels):
            g = np.ascontiguousarray(grad_out[:, level * F:(level + 1) * F])
            flat = np.empty(len(u) * 16, dtype=np.int64)
            _encode_level_backward(u, self._res(level), bool(self.dense[level]), self.table_size,
                                   self.tables[level], g, self.grads[level], flat, d_u)
            prev = self.touched[level]
            self.touched[level] = flat if prev is None else np.concatenate([prev, flat])
        d_u = np.where(inside, d_u, 0.0)
        lo, hi = self.aabb
        return d_u[:, :3] / (hi - lo)

    def touched_indices(self, level: int) -> np.ndarray:
        t = self.touched[level]
        return np.zeros(0, dtype=np.int64) if t is None else np.unique(t)

    def collision_rate(self, positions, times) -> float:
        """Finest-level fraction of distinct occupied cell corners that share a table slot."""
        u, _ = self.normalize(positions, times)
        level = self.n_levels - 1
        res = np.array([self.resolutions[level]] * 3 + [self.time_resolutions[level]], dtype=np.int64)
        base = np.minimum(np.floor(u * res).astype(np.int64), res - 1)
        coords = (base[:, None, :] + CORNERS[None]).reshape(-1, 4)
        uniq = np.unique(coords, axis=0)
        if self.dense[level]:
            return 0.0
        h = (uniq.astype(np.uint64) * PRIMES) & np.uint64(0xFFFFFFFF)
        slots = (h[:, 0] ^ h[:, 1] ^ h[:, 2] ^ h[:, 3]) & np.uint64(self.table_size - 1)
        return 1.0 - len(np.unique(slots)) / len(uniq)
