"""Differentiable tile-based Gaussian splatting on the CPU.

Forward: project -> per-tile depth-sorted lists -> front-to-back alpha compositing.
Every pixel keeps its ordered contribution records (splat, alpha, transmittance
before the splat) so the reverse pass replays them exactly instead of
re-rasterizing.

Pixel (row, col) is evaluated at image coordinates (col, row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .scene import Camera, GaussianCloud, quaternion_to_rotation, rotation_grad_to_quaternion
from .sh import eval_sh, eval_sh_backward


class MissingRecordsError(RuntimeError):
    """Raised when a reverse pass is requested for a render without contribution records."""


@dataclass(frozen=True)
class RasterSettings:
    near: float = 0.2
    far: float = 100.0
    blur: float = 0.3  # screen-space covariance floor added to every 2D footprint
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_min: float = 1e-4
    sigma_cutoff: float = 3.0
    tile_size: int = 16


@dataclass
class Projected:
    """Columnar list of projected Gaussians (one row per surviving splat)."""

    index: np.ndarray  # source row in the cloud
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # inverse covariance as (a, b, c)
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    payload: np.ndarray
    bbox: np.ndarray  # inclusive pixel box (x0, y0, x1, y1)
    n_points: int
    n_culled: int
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    payload: np.ndarray | None  # (H, W) pre-sigmoid composite
    final_T: np.ndarray  # (H*W,)
    offsets: np.ndarray | None  # (H*W+1,) record ranges per pixel, row-major
    rec_gid: np.ndarray | None  # projected-local splat id
    rec_alpha: np.ndarray | None
    rec_T: np.ndarray | None  # transmittance in front of the splat
    projected: Projected
    camera: Camera
    background: np.ndarray
    settings: RasterSettings

    @property
    def has_records(self) -> bool:
        return self.rec_gid is not None

    def record_pixels(self) -> np.ndarray:
        counts = np.diff(self.offsets)
        return np.repeat(np.arange(len(counts)), counts)

    def record_weights(self) -> np.ndarray:
        return self.rec_alpha * self.rec_T


@dataclass
class RasterGrads:
    """Per-projected-splat gradients from the compositing stage."""

    mean2d: np.ndarray
    conic: np.ndarray
    cov2d: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    payload: np.ndarray


def project(cloud: GaussianCloud, camera: Camera, settings: RasterSettings = RasterSettings(),
            subset=None, payload=None) -> Projected:
    """Project (a subset of) the cloud into ``camera``.

    Splats at or behind the near plane, beyond the far plane, or whose
    cutoff-sigma box misses the frame are culled silently; ``n_culled`` counts them.
    ``payload`` defaults to the dynamic parameter d.
    """
    n_points = len(cloud)
    idx = np.arange(n_points) if subset is None else np.asarray(subset, dtype=np.int64)
    n_candidates = len(idx)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_points):
        raise IndexError("subset index out of range")
    if payload is None:
        payload = cloud.dynamic_params
    Rw = camera.R
    means = np.asarray(cloud.means, dtype=np.float64)[idx]
    pv = means @ Rw.T + camera.t
    z = pv[:, 2]
    ok = (z > settings.near) & (z < settings.far)
    idx, means, pv, z = idx[ok], means[ok], pv[ok], z[ok]

    fx, fy = camera.fx, camera.fy
    x, y = pv[:, 0], pv[:, 1]
    mean2d = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    Tm = J @ Rw
    rot = quaternion_to_rotation(np.asarray(cloud.rotations, dtype=np.float64)[idx])
    S = np.exp(np.asarray(cloud.log_scales, dtype=np.float64)[idx])
    M = rot * S[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    cov2 = Tm @ cov3 @ np.swapaxes(Tm, 1, 2)
    cov2[:, 0, 0] += settings.blur
    cov2[:, 1, 1] += settings.blur

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    W, H = camera.width, camera.height
    opacity_all = 1.0 / (1.0 + np.exp(-np.asarray(cloud.opacity_logits, dtype=np.float64)[idx]))
    # beyond Mahalanobis radius sqrt(2 ln(o / alpha_min)) alpha falls under alpha_min, so the
    # box can shrink to it without changing the image
    with np.errstate(divide="ignore"):
        reach = np.sqrt(np.maximum(2.0 * np.log(opacity_all / settings.alpha_min), 0.0)) * (1 + 1e-6)
    cutoff = np.minimum(settings.sigma_cutoff, reach)
    rx = cutoff * np.sqrt(a)
    ry = cutoff * np.sqrt(c)
    x0 = np.ceil(np.clip(mean2d[:, 0] - rx, -1.0, W))
    x1 = np.floor(np.clip(mean2d[:, 0] + rx, -1.0, W))
    y0 = np.ceil(np.clip(mean2d[:, 1] - ry, -1.0, H))
    y1 = np.floor(np.clip(mean2d[:, 1] + ry, -1.0, H))
    bbox = np.stack([np.maximum(x0, 0), np.maximum(y0, 0),
                     np.minimum(x1, W - 1), np.minimum(y1, H - 1)], axis=1).astype(np.int32)
    visible = ((bbox[:, 0] <= bbox[:, 2]) & (bbox[:, 1] <= bbox[:, 3]) & (det > 0)
               & (opacity_all >= settings.alpha_min))

    sel = np.flatnonzero(visible)
    idx = idx[sel]
    opacity = opacity_all[sel]
    color, sh_cache = eval_sh(np.asarray(cloud.sh_coeffs)[idx], means[sel], camera.center)
    cache = dict(pv=pv[sel], Tm=Tm[sel], rot=rot[sel], S=S[sel], M=M[sel], cov3=cov3[sel],
                 rotations=np.asarray(cloud.rotations, dtype=np.float64)[idx], sh=sh_cache,
                 Rw=Rw, fx=fx, fy=fy)
    return Projected(
        index=idx, mean2d=mean2d[sel], cov2d=cov2[sel], conic=conic[sel], depth=z[sel],
        opacity=opacity, color=color, payload=np.asarray(payload, dtype=np.float64)[idx],
        bbox=bbox[sel], n_points=n_points, n_culled=n_candidates - len(idx), cache=cache,
    )


def _tile_lists(projected: Projected, width: int, height: int, tile_size: int):
    """Per-tile splat lists sorted by (depth, source index)."""
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    m = len(projected)
    if m == 0:
        z = np.zeros(n_tiles, dtype=np.int64)
        return z, z.copy(), np.zeros(0, dtype=np.int32), tiles_x
    order = np.lexsort((projected.index, projected.depth))
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m)
    bb = projected.bbox // tile_size
    nx = bb[:, 2] - bb[:, 0] + 1
    ny = bb[:, 3] - bb[:, 1] + 1
    counts = (nx * ny).astype(np.int64)
    owner = np.repeat(np.arange(m), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = bb[owner, 0] + local % nx[owner]
    ty = bb[owner, 1] + local // nx[owner]
    tile_id = ty * tiles_x + tx
    perm = np.lexsort((rank[owner], tile_id))
    tile_id = tile_id[perm]
    tile_list = owner[perm].astype(np.int32)
    starts = np.searchsorted(tile_id, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_id, np.arange(n_tiles), side="right")
    return starts.astype(np.int64), ends.astype(np.int64), tile_list, tiles_x


@njit(cache=True, parallel=True)
def _composite_kernel(tile_start, tile_end, tile_list, mean2d, conic, opacity, bbox, color,
                      payload, bg, width, height, tiles_x, tile_size, alpha_min, alpha_max, t_min,
                      scratch_base, counts, rec_gid, rec_alpha, rec_T, out_color, out_payload, final_T):
    # each pixel of tile k owns a slot of len(tile list) records starting at scratch_base[k]
    for tile in prange(len(tile_start)):
        tx = tile % tiles_x
        ty = tile // tiles_x
        stride = tile_end[tile] - tile_start[tile]
        slot = scratch_base[tile]
        # gather this tile's splats into contiguous rows: x0 y0 x1 y1 mx my ca cb cc o
        loc = np.empty((stride, 10))
        for j in range(stride):
            g = tile_list[tile_start[tile] + j]
            loc[j, 0] = bbox[g, 0]
            loc[j, 1] = bbox[g, 1]
            loc[j, 2] = bbox[g, 2]
            loc[j, 3] = bbox[g, 3]
            loc[j, 4] = mean2d[g, 0]
            loc[j, 5] = mean2d[g, 1]
            loc[j, 6] = conic[g, 0]
            loc[j, 7] = conic[g, 1]
            loc[j, 8] = conic[g, 2]
            loc[j, 9] = opacity[g]
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                pix = py * width + px
                T = 1.0
                n = 0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                cp = 0.0
                for j in range(stride):
                    if px < loc[j, 0] or px > loc[j, 2] or py < loc[j, 1] or py > loc[j, 3]:
                        continue
                    g = tile_list[tile_start[tile] + j]
                    dx = px - loc[j, 4]
                    dy = py - loc[j, 5]
                    power = -0.5 * (loc[j, 6] * dx * dx + loc[j, 8] * dy * dy) - loc[j, 7] * dx * dy
                    if power > 0.0:
                        continue
                    a = loc[j, 9] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    w = a * T
                    rec_gid[slot + n] = g
                    rec_alpha[slot + n] = a
                    rec_T[slot + n] = T
                    cr += color[g, 0] * w
                    cg += color[g, 1] * w
                    cb += color[g, 2] * w
                    cp += payload[g] * w
                    n += 1
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                out_color[pix, 0] = cr + T * bg[0]
                out_color[pix, 1] = cg + T * bg[1]
                out_color[pix, 2] = cb + T * bg[2]
                out_payload[pix] = cp
                final_T[pix] = T
                counts[pix] = n
                slot += stride


@njit(cache=True, parallel=True)
def _compact_kernel(width, height, tiles_x, tile_size, scratch_base, tile_start, tile_end, offsets,
                    s_gid, s_alpha, s_T, rec_gid, rec_alpha, rec_T):
    for tile in prange(len(tile_start)):
        tx = tile % tiles_x
        ty = tile // tiles_x
        stride = tile_end[tile] - tile_start[tile]
        slot = scratch_base[tile]
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                pix = py * width + px
                o = offsets[pix]
                for j in range(offsets[pix + 1] - o):
                    rec_gid[o + j] = s_gid[slot + j]
                    rec_alpha[o + j] = s_alpha[slot + j]
                    rec_T[o + j] = s_T[slot + j]
                slot += stride


@njit(cache=True)
def _segment_sum(gid, values, out):
    # sequential in record order, so the reduction is deterministic
    for k in range(len(gid)):
        out[gid[k]] += values[k]


@njit(cache=True)
def _segment_sum_rows(gid, values, out):
    for k in range(len(gid)):
        for j in range(values.shape[1]):
            out[gid[k], j] += values[k, j]


@njit(cache=True, parallel=True)
def _backward_kernel(width, offsets, rec_gid, rec_alpha, rec_T, final_T, mean2d, conic, opacity,
                     color, payload, bg, alpha_max, grad_color, grad_payload, do_color,
                     g_mean2d, g_conic, g_opacity, g_color, g_payload):
    n_pix = len(offsets) - 1
    for pix in prange(n_pix):
        o0 = offsets[pix]
        o1 = offsets[pix + 1]
        if o1 == o0:
            continue
        px = pix % width
        py = pix // width
        gp = grad_payload[pix]
        gr = 0.0
        gg = 0.0
        gb = 0.0
        if do_color:
            gr = grad_color[pix, 0]
            gg = grad_color[pix, 1]
            gb = grad_color[pix, 2]
        Tf = final_T[pix]
        # everything composited behind the current splat, background included
        acc_r = Tf * bg[0]
        acc_g = Tf * bg[1]
        acc_b = Tf * bg[2]
        acc_p = 0.0
        for k in range(o1 - 1, o0 - 1, -1):
            g = rec_gid[k]
            a = rec_alpha[k]
            t = rec_T[k]
            w = a * t
            g_payload[k] = gp * (a * t)
            dl_da = gp * (payload[g] * t - acc_p / (1.0 - a))
            acc_p += payload[g] * w
            if do_color:
                g_color[k, 0] = gr * w
                g_color[k, 1] = gg * w
                g_color[k, 2] = gb * w
                dl_da += gr * (color[g, 0] * t - acc_r / (1.0 - a))
                dl_da += gg * (color[g, 1] * t - acc_g / (1.0 - a))
                dl_da += gb * (color[g, 2] * t - acc_b / (1.0 - a))
                acc_r += color[g, 0] * w
                acc_g += color[g, 1] * w
                acc_b += color[g, 2] * w
            dx = px - mean2d[g, 0]
            dy = py - mean2d[g, 1]
            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
            G = np.exp(power)
            if opacity[g] * G > alpha_max:
                continue
            g_opacity[k] = dl_da * G
            dpow = dl_da * a
            # d power / d mean = conic @ (p - mean)
            g_mean2d[k, 0] = dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
            g_mean2d[k, 1] = dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
            g_conic[k, 0] = -0.5 * dx * dx * dpow
            g_conic[k, 1] = -dx * dy * dpow
            g_conic[k, 2] = -0.5 * dy * dy * dpow


@njit(cache=True, parallel=True)
def _payload_kernel(offsets, rec_gid, rec_alpha, rec_T, values, out):
    for pix in prange(len(offsets) - 1):
        s = 0.0
        for k in range(offsets[pix], offsets[pix + 1]):
            s += values[rec_gid[k]] * (rec_alpha[k] * rec_T[k])
        out[pix] = s


def rasterize(projected: Projected, camera: Camera, background=(0.0, 0.0, 0.0),
              payload_mode: str = "color", settings: RasterSettings = RasterSettings(),
              retain_records: bool = True) -> RenderOutput:
    """Alpha-composite projected splats front to back.

    ``payload_mode="dynamic_value"`` additionally composites each splat's scalar
    payload with the same weights; the pre-sigmoid sum lands in ``payload``.
    """
    if payload_mode not in ("color", "dynamic_value"):
        raise ValueError(f"unknown payload_mode {payload_mode!r}")
    W, H = camera.width, camera.height
    ts = settings.tile_size
    bg = np.asarray(background, dtype=np.float64)
    starts, ends, tile_list, tiles_x = _tile_lists(projected, W, H, ts)
    m = len(projected)
    mean2d = np.ascontiguousarray(projected.mean2d, dtype=np.float64).reshape(m, 2)
    conic = np.ascontiguousarray(projected.conic, dtype=np.float64).reshape(m, 3)
    opacity = np.ascontiguousarray(projected.opacity, dtype=np.float64)
    color = np.ascontiguousarray(projected.color, dtype=np.float64).reshape(m, 3)
    if payload_mode == "dynamic_value":
        payload = np.ascontiguousarray(projected.payload, dtype=np.float64)
    else:
        payload = np.zeros(m)
    bbox = np.ascontiguousarray(projected.bbox, dtype=np.int32).reshape(m, 4)
    n_pix = W * H
    # per-tile scratch capacity: every pixel may hit each splat in its tile's list once
    tile_px = np.array([(min(H, (t // tiles_x + 1) * ts) - (t // tiles_x) * ts)
                        * (min(W, (t % tiles_x + 1) * ts) - (t % tiles_x) * ts)
                        for t in range(len(starts))], dtype=np.int64)
    cap = (ends - starts) * tile_px
    scratch_base = np.zeros(len(starts), dtype=np.int64)
    np.cumsum(cap[:-1], out=scratch_base[1:])
    total_cap = int(cap.sum())
    counts = np.zeros(n_pix, dtype=np.int64)
    s_gid = np.empty(total_cap, dtype=np.int32)
    s_alpha = np.empty(total_cap)
    s_T = np.empty(total_cap)
    out_color = np.empty((n_pix, 3))
    out_payload = np.empty(n_pix)
    final_T = np.empty(n_pix)
    _composite_kernel(starts, ends, tile_list, mean2d, conic, opacity, bbox, color, payload, bg, W, H,
                      tiles_x, ts, settings.alpha_min, settings.alpha_max, settings.t_min,
                      scratch_base, counts, s_gid, s_alpha, s_T, out_color, out_payload, final_T)
    offsets = np.zeros(n_pix + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    if retain_records:
        rec_gid = np.empty(total, dtype=np.int32)
        rec_alpha = np.empty(total)
        rec_T = np.empty(total)
        _compact_kernel(W, H, tiles_x, ts, scratch_base, starts, ends, offsets,
                        s_gid, s_alpha, s_T, rec_gid, rec_alpha, rec_T)
    del s_gid, s_alpha, s_T
    out = RenderOutput(
        color=out_color.reshape(H, W, 3),
        alpha=(1.0 - final_T).reshape(H, W),
        payload=out_payload.reshape(H, W) if payload_mode == "dynamic_value" else None,
        final_T=final_T, offsets=None, rec_gid=None, rec_alpha=None, rec_T=None,
        projected=projected, camera=camera, background=bg, settings=settings,
    )
    if retain_records:
        out.offsets, out.rec_gid, out.rec_alpha, out.rec_T = offsets, rec_gid, rec_alpha, rec_T
    return out


def composite_payload(output: RenderOutput, values: np.ndarray) -> np.ndarray:
    """Re-composite a new per-splat scalar with the recorded weights (geometry unchanged)."""
    if not output.has_records:
        raise MissingRecordsError("render was produced without contribution records")
    H, W = output.color.shape[:2]
    out = np.empty(H * W)
    _payload_kernel(output.offsets, output.rec_gid, output.rec_alpha, output.rec_T,
                    np.ascontiguousarray(values, dtype=np.float64), out)
    return out.reshape(H, W)


def rasterize_backward(output: RenderOutput, grad_color=None, grad_payload=None,
                       payload_values=None) -> RasterGrads:
    """Reverse pass of :func:`rasterize` over the recorded contributions.

    Either upstream image may be None (treated as zero). ``payload_values``
    overrides the per-splat payload (used when d changed since the render).
    The d-channel gradient of splat g is ``sum_pixels grad_payload * (alpha_g * T_g)``.
    """
    if not output.has_records:
        raise MissingRecordsError("render was produced without contribution records")
    proj = output.projected
    m = len(proj)
    H, W = output.color.shape[:2]
    n_rec = len(output.rec_gid)
    do_color = grad_color is not None
    gc = (np.ascontiguousarray(grad_color, dtype=np.float64).reshape(H * W, 3)
          if do_color else np.zeros((1, 3)))
    gp = (np.ascontiguousarray(grad_payload, dtype=np.float64).reshape(H * W)
          if grad_payload is not None else np.zeros(H * W))
    payload = proj.payload if payload_values is None else payload_values
    payload = np.ascontiguousarray(payload, dtype=np.float64)
    g_mean2d = np.zeros((n_rec, 2))
    g_conic = np.zeros((n_rec, 3))
    g_opacity = np.zeros(n_rec)
    g_color = np.zeros((n_rec, 3))
    g_payload = np.zeros(n_rec)
    _backward_kernel(W, output.offsets, output.rec_gid, output.rec_alpha, output.rec_T,
                     output.final_T, np.ascontiguousarray(proj.mean2d, dtype=np.float64).reshape(m, 2),
                     np.ascontiguousarray(proj.conic, dtype=np.float64).reshape(m, 3),
                     np.ascontiguousarray(proj.opacity, dtype=np.float64),
                     np.ascontiguousarray(proj.color, dtype=np.float64).reshape(m, 3),
                     payload, output.background, output.settings.alpha_max, gc, gp, do_color,
                     g_mean2d, g_conic, g_opacity, g_color, g_payload)

    gid = output.rec_gid

    def reduce(v):
        if v.ndim == 1:
            out = np.zeros(m)
            _segment_sum(gid, v, out)
        else:
            out = np.zeros((m, v.shape[1]))
            _segment_sum_rows(gid, v, out)
        return out

    conic_g = reduce(g_conic)
    # d conic -> d cov2d:  dL/dSigma = -K G K with G the symmetric-matrix form of the conic gradient
    K = np.empty((m, 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    G = np.empty((m, 2, 2))
    G[:, 0, 0], G[:, 1, 1] = conic_g[:, 0], conic_g[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * conic_g[:, 1]
    cov_g = -K @ G @ K
    return RasterGrads(mean2d=reduce(g_mean2d), conic=conic_g, cov2d=cov_g,
                       opacity=reduce(g_opacity), color=reduce(g_color), payload=reduce(g_payload))


def project_backward(projected: Projected, grads: RasterGrads) -> dict[str, np.ndarray]:
    """Chain per-splat 2D gradients back to the cloud's raw parameters (full N rows)."""
    n = projected.n_points
    c = projected.cache
    idx = projected.index
    pv, Tm, rot, S, M, cov3 = c["pv"], c["Tm"], c["rot"], c["S"], c["M"], c["cov3"]
    x, y, z = pv[:, 0], pv[:, 1], pv[:, 2]
    Gp = grads.cov2d  # symmetric

    # Sigma' = T Sigma T^T
    d_cov3 = np.swapaxes(Tm, 1, 2) @ Gp @ Tm
    d_T = 2.0 * Gp @ Tm @ cov3
    Rw, fx, fy = c["Rw"], c["fx"], c["fy"]
    d_J = d_T @ Rw.T
    d_pv = np.zeros_like(pv)
    d_pv[:, 2] += d_J[:, 0, 0] * (-fx / z**2) + d_J[:, 0, 2] * (2 * fx * x / z**3)
    d_pv[:, 0] += d_J[:, 0, 2] * (-fx / z**2)
    d_pv[:, 2] += d_J[:, 1, 1] * (-fy / z**2) + d_J[:, 1, 2] * (2 * fy * y / z**3)
    d_pv[:, 1] += d_J[:, 1, 2] * (-fy / z**2)
    gm = grads.mean2d
    d_pv[:, 0] += gm[:, 0] * fx / z
    d_pv[:, 1] += gm[:, 1] * fy / z
    d_pv[:, 2] += -gm[:, 0] * fx * x / z**2 - gm[:, 1] * fy * y / z**2
    d_means = d_pv @ Rw

    # Sigma = M M^T, M = R diag(S)
    d_M = 2.0 * d_cov3 @ M
    d_S = (rot * d_M).sum(axis=1)
    d_rot = d_M * S[:, None, :]
    d_q = rotation_grad_to_quaternion(c["rotations"], d_rot)

    d_sh, d_means_sh = eval_sh_backward(c["sh"], grads.color)
    d_means += d_means_sh
    op = projected.opacity

    out = {
        "means": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "sh_coeffs": np.zeros((n,) + d_sh.shape[1:]),
        "dynamic_params": np.zeros(n),
    }
    out["means"][idx] = d_means
    out["rotations"][idx] = d_q
    out["log_scales"][idx] = d_S * S
    out["opacity_logits"][idx] = grads.opacity * op * (1.0 - op)
    out["sh_coeffs"][idx] = d_sh
    out["dynamic_params"][idx] = grads.payload
    return out


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
           payload_mode: str = "color", settings: RasterSettings = RasterSettings(),
           retain_records: bool = True, payload=None) -> RenderOutput:
    proj = project(cloud, camera, settings, payload=payload)
    return rasterize(proj, camera, background, payload_mode, settings, retain_records)


def render_backward(output: RenderOutput, grad_color=None, grad_payload=None,
                    payload_values=None) -> tuple[dict[str, np.ndarray], RasterGrads]:
    """Full reverse pass: image gradients -> raw cloud parameter gradients."""
    rg = rasterize_backward(output, grad_color, grad_payload, payload_values)
    return project_backward(output.projected, rg), rg
