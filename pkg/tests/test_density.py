import numpy as np
import pytest

from splat4d.density import (DensifyConfig, ImportanceReport, StaleReportError, compute_importance,
                             densify, prune)
from splat4d.optim import Adam
from splat4d.rasterizer import render
from splat4d.scene import quaternion_to_rotation

from oracles import importance_oracle, random_cloud, small_camera
from test_deform import make_parts


def two_cams(size=24):
    return [small_camera(size), small_camera(size, eye=(1.5, 0.5, -3.5), camera_id=1)]


@pytest.mark.parametrize("seed", range(3))
def test_importance_matches_replay_oracle(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 10)
    cloud.dynamic_flags = rng.uniform(size=10) < 0.5
    grid, dec = make_parts(seed)
    cams, times = two_cams(), [0.0, 0.5, 1.0]
    rep = compute_importance(cloud, cams, times, grid, dec)
    assert np.allclose(rep.weights, importance_oracle(cloud, cams, times, grid, dec), atol=1e-14)
    assert np.all((rep.weights >= 0) & (rep.weights <= 1))


def test_static_cloud_importance_matches_oracle():
    cloud = random_cloud(np.random.default_rng(9), 10)
    cams = two_cams()
    rep = compute_importance(cloud, cams, [0.0, 1.0])
    assert np.allclose(rep.weights, importance_oracle(cloud, cams, [0.0]), atol=1e-14)


def test_floaters_are_pruned_without_changing_renders():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 20)
    floaters = random_cloud(rng, 3)
    floaters.means[:] = [[0, 0, -9.0], [40, 0, 0], [0, -40, 1]]  # behind, left of and above every view
    scene = cloud.concat(floaters)
    cams = two_cams()
    rep = compute_importance(scene, cams, [0.0])
    assert np.all(rep.weights[20:] == 0)
    pruned, keep = prune(scene, rep, threshold=1e-12)
    assert len(pruned) == 20 and np.array_equal(keep, np.arange(20))
    for cam in cams:
        diff = np.abs(render(pruned, cam).color - render(scene, cam).color).max()
        assert diff < 1e-6


def test_prune_threshold_is_strict_and_remaps_optimizer():
    cloud = random_cloud(np.random.default_rng(0), 4)
    rep = ImportanceReport(np.array([0.01, 0.02, 0.5, 0.0]), [0], [0.0], 0.02, np.array([0, 3]))
    opt = Adam({"means": 0.1})
    opt.step({"means": cloud.means}, {"means": np.arange(12.0).reshape(4, 3)})
    m_before = opt.m["means"].copy()
    out, keep = prune(cloud, rep, optimizer=opt, names=["means"])
    assert keep.tolist() == [1, 2]
    assert np.array_equal(opt.m["means"], m_before[[1, 2]])
    with pytest.raises(StaleReportError):
        prune(out, rep)


def test_report_json_and_errors():
    rep = ImportanceReport(np.array([0.1, 0.0]), [3], [0.5], 0.02, np.array([1]))
    js = rep.to_json()
    assert js["points"][1] == {"index": 1, "w": 0.0, "pruned": True}
    cloud = random_cloud(np.random.default_rng(0), 2)
    with pytest.raises(ValueError):
        compute_importance(cloud, [], [0.0])
    with pytest.raises(ValueError):
        compute_importance(cloud, two_cams(), [])


def test_densify_clone_and_split():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 4)
    cloud.log_scales[:] = np.log([[0.001] * 3, [0.001] * 3, [0.5] * 3, [0.5] * 3])
    cloud.dynamic_params[:] = [1.0, 2.0, 3.0, 4.0]
    cloud.dynamic_flags = np.array([False, True, False, True])
    grads = np.array([1e-3, 0.0, 1e-3, 0.0])
    opt = Adam({"means": 0.1})
    opt.step({"means": cloud.means}, {"means": np.ones((4, 3))})
    out, parents = densify(cloud, grads, 10.0, DensifyConfig(), rng, opt, ["means"])
    # kept originals [0, 1, 3], clone of 0, two children of 2
    assert parents.tolist() == [0, 1, 3, 0, 2, 2]
    assert len(out) == 6
    for name, arr in out.params().items():
        assert np.array_equal(arr[3], cloud.params()[name][0])
    assert np.allclose(out.log_scales[4:], np.log(0.5 / 1.6))
    assert np.array_equal(out.dynamic_params, cloud.dynamic_params[parents])
    assert np.array_equal(out.dynamic_flags, cloud.dynamic_flags[parents])
    assert opt.m["means"].shape == (6, 3) and not opt.m["means"][3:].any()


def test_split_children_follow_parent_footprint():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 1)
    cloud.log_scales[:] = np.log([[1.0, 0.1, 0.01]])
    many = cloud.select(np.zeros(4000, dtype=int))
    out, _ = densify(many, np.ones(4000), 1.0, DensifyConfig(), rng)
    off = out.means - cloud.means[0]
    local = off @ quaternion_to_rotation(cloud.rotations[0])  # R^T offset
    assert np.allclose(local.std(axis=0), [1.0, 0.1, 0.01], rtol=0.05)
    assert np.allclose(local.mean(axis=0), 0, atol=0.05)


def test_densify_noop_below_threshold():
    cloud = random_cloud(np.random.default_rng(0), 5)
    out, parents = densify(cloud, np.zeros(5), 1.0)
    assert out is cloud and parents.tolist() == list(range(5))
