import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.rasterizer import (MissingRecordsError, RasterSettings, composite_payload, project,
                                rasterize, rasterize_backward, render, render_backward)
from splat4d.scene import GaussianCloud

from oracles import SMOOTH, assert_grad_close, central_difference, random_cloud, replay_composite, small_camera

BG = (0.1, 0.2, 0.3)


@pytest.mark.parametrize("seed", range(4))
def test_render_matches_tileless_replay(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 25)
    cam = small_camera(24)
    out = render(cloud, cam, BG)
    img, final_T, contrib = replay_composite(out.projected, cam, BG)
    assert np.allclose(out.color, img, atol=1e-12)
    assert np.allclose(out.final_T, final_T.reshape(-1), atol=1e-12)
    w = out.record_weights()
    for pix, rows in enumerate(contrib):
        lo, hi = out.offsets[pix], out.offsets[pix + 1]
        assert out.rec_gid[lo:hi].tolist() == [g for g, _ in rows]
        assert np.allclose(w[lo:hi], [x for _, x in rows], atol=1e-14)


def test_tile_size_does_not_change_output():
    cloud = random_cloud(np.random.default_rng(7), 40)
    cam = small_camera(40)
    a = render(cloud, cam, BG, settings=RasterSettings(tile_size=16))
    b = render(cloud, cam, BG, settings=RasterSettings(tile_size=8))
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.rec_gid, b.rec_gid)


def test_render_is_deterministic():
    cloud = random_cloud(np.random.default_rng(8), 40)
    cam = small_camera(32)
    g = np.random.default_rng(0).normal(size=(32, 32, 3))
    a, b = render(cloud, cam), render(cloud, cam)
    assert np.array_equal(a.color, b.color)
    ga, _ = render_backward(a, g)
    gb, _ = render_backward(b, g)
    for k in ga:
        assert np.array_equal(ga[k], gb[k])


def test_empty_cloud_renders_background():
    out = render(GaussianCloud.empty(), small_camera(16), BG)
    assert np.allclose(out.color, BG) and np.all(out.alpha == 0)
    assert len(out.rec_gid) == 0


def test_culls_splats_behind_camera_and_offscreen():
    cloud = random_cloud(np.random.default_rng(1), 3)
    cloud.means[:] = [[0, 0, -5.0], [50, 0, 0], [0, 0, 0]]
    proj = project(cloud, small_camera(16))
    assert proj.index.tolist() == [2] and proj.n_culled == 2


def test_subset_out_of_range():
    cloud = random_cloud(np.random.default_rng(1), 3)
    with pytest.raises(IndexError):
        project(cloud, small_camera(16), subset=[5])


def test_alpha_is_clamped():
    cloud = random_cloud(np.random.default_rng(2), 1)
    cloud.means[:] = 0
    cloud.opacity_logits[:] = 20.0
    out = render(cloud, small_camera(16))
    assert out.alpha.max() <= 0.99 + 1e-15


def test_payload_composite_matches_reuse():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 30)
    cam = small_camera(32)
    out = render(cloud, cam, payload_mode="dynamic_value")
    again = composite_payload(out, out.projected.payload)
    assert np.array_equal(out.payload, again)
    new = rng.normal(size=len(out.projected))
    manual = np.zeros(32 * 32)
    np.add.at(manual, out.record_pixels(), new[out.rec_gid] * out.record_weights())
    assert np.allclose(composite_payload(out, new).reshape(-1), manual, atol=1e-12)


def test_missing_records_raise():
    cloud = random_cloud(np.random.default_rng(5), 5)
    out = render(cloud, small_camera(16), retain_records=False)
    assert not out.has_records
    with pytest.raises(MissingRecordsError):
        rasterize_backward(out, np.zeros((16, 16, 3)))
    with pytest.raises(MissingRecordsError):
        composite_payload(out, np.zeros(len(out.projected)))
    full = render(cloud, small_camera(16))
    assert np.array_equal(out.color, full.color)


def test_unknown_payload_mode():
    cloud = random_cloud(np.random.default_rng(5), 5)
    cam = small_camera(16)
    with pytest.raises(ValueError):
        rasterize(project(cloud, cam), cam, payload_mode="depth")


@pytest.mark.parametrize("seed,degree", [(10, 0), (11, 1), (12, 3)])
def test_gradients_match_finite_differences(seed, degree):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 12, degree)
    cam = small_camera(20)
    gC = rng.normal(size=(20, 20, 3))
    gP = rng.normal(size=(20, 20))

    def loss():
        o = render(cloud, cam, BG, "dynamic_value", SMOOTH)
        return (o.color * gC).sum() + (o.payload * gP).sum()

    out = render(cloud, cam, BG, "dynamic_value", SMOOTH)
    grads, _ = render_backward(out, gC, gP)
    for name, arr in cloud.params().items():
        num = np.array([central_difference(loss, arr, i) for i in range(arr.size)]).reshape(arr.shape)
        assert_grad_close(grads[name], num, label=name)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_transmittance_and_weights_consistent(seed, n):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n)
    out = render(cloud, small_camera(16))
    w = out.record_weights()
    sums = np.zeros(16 * 16)
    np.add.at(sums, out.record_pixels(), w)
    assert np.all((out.final_T >= 0) & (out.final_T <= 1))
    assert np.allclose(sums, 1 - out.final_T, atol=1e-12)
    # transmittance never increases along a pixel's list
    for p in range(16 * 16):
        T = out.rec_T[out.offsets[p]:out.offsets[p + 1]]
        assert np.all(np.diff(T) <= 0)
