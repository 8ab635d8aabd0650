"""Adam over named numpy parameter arrays, with a row-sparse variant for hash tables."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _sparse_adam(p, g, m, v, rows, lr, b1, b2, bc1, bc2, eps):
    for r in rows:
        for j in range(p.shape[1]):
            gr = g[r, j]
            mr = m[r, j] * b1 + (1.0 - b1) * gr
            vr = v[r, j] * b2 + (1.0 - b2) * gr * gr
            m[r, j] = mr
            v[r, j] = vr
            upd = (lr / bc1) * mr / (np.sqrt(vr / bc2) + eps)
            p[r, j] = p[r, j] - p.dtype.type(upd)


class Adam:
    """Adam that updates parameter arrays in place.

    State is keyed by parameter name so callers can swap arrays after
    structural edits (pruning, densification) and remap the moments with
    :meth:`remap_rows`.
    """

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def _state(self, name, shape):
        if name not in self.m or self.m[name].shape != shape:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], sparse=None) -> None:
        """One update for every name in ``grads``.

        ``sparse`` maps a name to the row indices that received gradient; only
        those rows (and their moments) are touched, the convention used for
        hash-table features. Bias correction always uses the global step.
        """
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        sparse = sparse or {}
        for name, g in grads.items():
            lr = self.lrs[name]
            p = params[name]
            m, v = self._state(name, p.shape)
            if name in sparse:
                rows = np.asarray(sparse[name], dtype=np.int64)
                if len(rows) == 0:
                    continue
                if p.ndim == 2:
                    # compiled row loop; fancy indexing dominated stage 3
                    _sparse_adam(p, np.asarray(g, np.float64), m, v, rows, lr,
                                 self.beta1, self.beta2, bc1, bc2, self.eps)
                    continue
                gr = g[rows]
                mr = m[rows] * self.beta1 + (1.0 - self.beta1) * gr
                vr = v[rows] * self.beta2 + (1.0 - self.beta2) * gr * gr
                m[rows] = mr
                v[rows] = vr
                upd = (lr / bc1) * mr / (np.sqrt(vr / bc2) + self.eps)
                p[rows] = p[rows] - upd.astype(p.dtype)
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            upd = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p -= upd.astype(p.dtype)

    def remap_rows(self, name: str, index: np.ndarray) -> None:
        """Reorder moment rows; ``index == -1`` starts a fresh zero row."""
        if name not in self.m:
            return
        index = np.asarray(index)
        for store in (self.m, self.v):
            old = store[name]
            new = np.zeros((len(index),) + old.shape[1:])
            keep = index >= 0
            new[keep] = old[index[keep]]
            store[name] = new
