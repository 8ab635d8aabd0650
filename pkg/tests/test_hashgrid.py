import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.hashgrid import CORNERS, HashGrid4D

from oracles import assert_grad_close, central_difference


def small_grid(log2_size=10, init_range=1.0, **kw):
    return HashGrid4D(n_levels=4, n_features=2, log2_size=log2_size, base_resolution=2,
                      finest_resolution=9, dtype=np.float64, init_range=init_range, seed=1, **kw)


def level_slice(grid, level, u):
    lo, hi = grid.aabb
    pos = lo + u[:, :3] * (hi - lo)
    F = grid.n_features
    return grid.encode(pos, u[:, 3])[:, level * F:(level + 1) * F]


def test_output_length_and_levels():
    grid = small_grid()
    assert grid.output_dim == 8
    assert grid.encode(np.zeros((5, 3)), 0.3).shape == (5, 8)
    assert np.all(np.diff(grid.resolutions) > 0)


@pytest.mark.parametrize("log2_size", [6, 20])  # hashed and dense lookups
def test_vertex_exactness(log2_size):
    grid = small_grid(log2_size)
    rng = np.random.default_rng(0)
    for level in range(grid.n_levels):
        res = np.array([grid.resolutions[level]] * 3 + [grid.time_resolutions[level]])
        verts = rng.integers(0, res + 1, size=(20, 4))
        u = verts / res
        idx, w, _, _ = grid._level_lookup(level, u)
        # exactly one corner carries the full weight
        hit = idx[np.arange(20), w.argmax(1)]
        expected = grid.tables[level][hit]
        assert np.allclose(level_slice(grid, level, u), expected, atol=1e-12)
        assert np.allclose(w.max(1), 1.0, atol=1e-12)


def test_edge_midpoint_is_linear():
    grid = small_grid()
    rng = np.random.default_rng(1)
    for level in range(grid.n_levels):
        res = np.array([grid.resolutions[level]] * 3 + [grid.time_resolutions[level]])
        for axis in range(4):
            base = rng.integers(0, res, size=(10, 4))
            step = np.zeros(4, dtype=int)
            step[axis] = 1
            a = level_slice(grid, level, base / res)
            b = level_slice(grid, level, (base + step) / res)
            m = level_slice(grid, level, (base + 0.5 * step) / res)
            assert np.allclose(m, 0.5 * (a + b), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_weights_sum_to_one(u):
    grid = small_grid()
    u = np.array([u])
    for level in range(grid.n_levels):
        _, w, _, _ = grid._level_lookup(level, u)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w >= 0)


def test_continuity_across_cell_faces():
    grid = small_grid(6)
    rng = np.random.default_rng(2)
    eps = 1e-9
    worst = 0.0
    for level in range(grid.n_levels):
        res = np.array([grid.resolutions[level]] * 3 + [grid.time_resolutions[level]])
        for axis in range(4):
            u = rng.uniform(0, 1, size=(50, 4))
            u[:, axis] = rng.integers(1, res[axis], 50) / res[axis]
            lo, hi = u.copy(), u.copy()
            lo[:, axis] -= eps
            hi[:, axis] += eps
            worst = max(worst, np.abs(level_slice(grid, level, hi) - level_slice(grid, level, lo)).max())
    assert worst < 1e-6


def test_dense_levels_are_collision_free():
    grid = small_grid(20)
    assert grid.dense.all()
    for level in range(grid.n_levels):
        res = np.array([grid.resolutions[level]] * 3 + [grid.time_resolutions[level]])
        cells = np.stack(np.meshgrid(*[np.arange(r) for r in res], indexing="ij"), -1).reshape(-1, 4)
        idx, _, _, _ = grid._level_lookup(level, (cells + 0.5) / res)
        coords = (cells[:, None, :] + CORNERS[None]).reshape(-1, 4)
        pairs = np.unique(np.c_[coords, idx.reshape(-1)], axis=0)
        assert len(np.unique(pairs[:, :4], axis=0)) == len(np.unique(pairs[:, 4]))


def test_hashed_level_collisions_reported():
    grid = small_grid(4)
    assert not grid.dense[-1]
    pts = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    assert 0 < grid.collision_rate(pts, 0.5) <= 1


def test_out_of_range_inputs_clamp():
    grid = small_grid()
    inside = grid.encode(np.array([[1.0, 1.0, 1.0]]), 1.0)
    outside = grid.encode(np.array([[3.0, 5.0, 1.0]]), 2.0)
    assert np.array_equal(inside, outside)


@pytest.mark.parametrize("log2_size", [6, 20])
def test_gradients_match_finite_differences(log2_size):
    grid = small_grid(log2_size)
    rng = np.random.default_rng(3)
    pos = rng.uniform(-0.9, 0.9, (6, 3))
    t = 0.37
    G = rng.normal(size=(6, grid.output_dim))

    def loss():
        return (grid.encode(pos, t) * G).sum()

    grid.zero_grad()
    d_pos = grid.encode_backward(pos, t, G)
    for level in range(grid.n_levels):
        table = grid.tables[level]
        touched = grid.touched_indices(level)
        rows = np.unique(np.r_[touched[:8], rng.integers(0, len(table), 3)])
        for r in rows:
            for f in range(grid.n_features):
                num = central_difference(loss, table, r * grid.n_features + f, 1e-5)
                assert_grad_close(grid.grads[level][r, f], num, label=f"table {level}")
    num = np.array([central_difference(loss, pos, i, 1e-6) for i in range(pos.size)]).reshape(pos.shape)
    assert_grad_close(d_pos, num, label="positions")


def test_zero_grad_clears_touched_rows():
    grid = small_grid(6)
    pos = np.random.default_rng(0).uniform(-1, 1, (4, 3))
    grid.encode_backward(pos, 0.2, np.ones((4, grid.output_dim)))
    assert any(len(grid.touched_indices(level)) for level in range(grid.n_levels))
    grid.zero_grad()
    assert all(not g.any() for g in grid.grads)
    assert all(len(grid.touched_indices(level)) == 0 for level in range(grid.n_levels))
