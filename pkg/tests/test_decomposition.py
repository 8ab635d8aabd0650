import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat4d.decomposition import (bce_loss, compute_masks, optimize_dynamic_params, sigmoid,
                                   smooth_variance, temporal_std)
from splat4d.rasterizer import composite_payload, rasterize_backward, render

from oracles import (SMOOTH, assert_grad_close, central_difference, payload_grad_from_records,
                     random_cloud, small_camera)


def test_constant_video_is_all_static():
    v = np.full((5, 20, 20, 3), 0.4)
    ms = compute_masks([v, v * 0.5], 0.02)
    assert all(not m.any() for m in ms.masks)
    assert all(np.all(s == 0) for s in ms.std_maps)


def test_two_frame_alternation_has_half_std():
    v = np.zeros((2, 4, 4, 3))
    v[1, 1, 2] = 1.0
    s = temporal_std(v)
    assert s[1, 2] == 0.5
    assert np.count_nonzero(s) == 1


def test_std_uses_channel_mean():
    v = np.zeros((2, 3, 3, 3))
    v[1, 0, 0] = [1.0, 0.0, 0.0]
    assert temporal_std(v)[0, 0] == pytest.approx(1 / 6)
    assert temporal_std(v[..., 0])[0, 0] == 0.5


def test_smoothing_spreads_and_preserves_mass_inside():
    s = np.zeros((64, 64))
    s[32, 32] = 1.0
    v = smooth_variance(s)
    assert v[32, 32] < 1 and v[32, 40] > 0
    assert v.sum() == pytest.approx(1.0, rel=1e-6)


def test_moving_square_mask():
    frames = np.zeros((6, 64, 64, 3))
    for t in range(6):
        frames[t, 20:30, 10 + 4 * t:20 + 4 * t] = 1.0
    m = compute_masks([frames], 0.02).masks[0]
    assert m[25, 25] == 1 and m[60, 60] == 0 and m[2, 2] == 0


def test_mask_input_validation():
    with pytest.raises(ValueError):
        compute_masks([], 0.02)
    with pytest.raises(ValueError):
        compute_masks([np.zeros((1, 4, 4))])
    with pytest.raises(ValueError):
        compute_masks([np.zeros((3, 4, 4)), np.zeros((3, 5, 4))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=12)
    d = rng.integers(0, 2, 12).astype(float)
    _, g = bce_loss(sigmoid(x), d)
    num = np.array([central_difference(lambda: bce_loss(sigmoid(x), d)[0], x, i, 1e-6) for i in range(12)])
    assert_grad_close(g, num, label="bce")


def test_zero_d_composite_gives_one_half():
    cloud = random_cloud(np.random.default_rng(0), 20)
    cloud.dynamic_params[:] = 0.0
    out = render(cloud, small_camera(16), payload_mode="dynamic_value")
    assert np.all(sigmoid(out.payload) == 0.5)


@pytest.mark.parametrize("seed", range(3))
def test_d_gradient_formula_and_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 15)
    cam = small_camera(16)
    target = rng.integers(0, 2, (16, 16)).astype(float)

    def loss():
        o = render(cloud, cam, payload_mode="dynamic_value", settings=SMOOTH)
        return bce_loss(sigmoid(o.payload), target)[0]

    out = render(cloud, cam, payload_mode="dynamic_value", settings=SMOOTH)
    _, grad1 = bce_loss(sigmoid(out.payload), target)
    g = rasterize_backward(out, grad_payload=grad1).payload
    assert np.array_equal(g, payload_grad_from_records(out, grad1))
    num = np.array([central_difference(loss, cloud.dynamic_params, i) for i in out.projected.index])
    assert_grad_close(g, num, label="d")


def test_optimization_only_changes_d_and_separates_points():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 2)
    cloud.means[:] = [[-0.6, 0, 0], [0.6, 0, 0]]
    cloud.log_scales[:] = np.log(0.15)
    cloud.opacity_logits[:] = 2.0
    cloud.dynamic_params[:] = 0.0
    cams = [small_camera(32), small_camera(32, eye=(0.5, 0.3, -4.0), camera_id=1)]
    before = {k: v.copy() for k, v in cloud.params().items()}
    # masks: left half of each image is dynamic
    masks = []
    for cam in cams:
        out = render(cloud, cam, payload_mode="dynamic_value")
        m = (np.arange(32)[None, :] < out.projected.mean2d[0, 0] + 8).astype(np.uint8) * np.ones((32, 1), np.uint8)
        masks.append(m)
    ms = compute_masks([np.zeros((2, 32, 32))] * 2)
    ms.masks = masks
    losses = optimize_dynamic_params(cloud, cams, ms, steps=400, lr=0.05, seed=0)
    assert losses[-1] < losses[0]
    assert cloud.dynamic_params[0] > cloud.dynamic_params[1]
    for k, v in cloud.params().items():
        if k != "dynamic_params":
            assert np.array_equal(v, before[k])


def test_optimize_requires_matching_masks():
    cloud = random_cloud(np.random.default_rng(0), 2)
    ms = compute_masks([np.zeros((2, 8, 8))])
    with pytest.raises(ValueError):
        optimize_dynamic_params(cloud, [small_camera(8), small_camera(8)], ms, steps=1)
