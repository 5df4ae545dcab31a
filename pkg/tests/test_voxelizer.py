import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panoptiq.pointcloud import DEFAULT_CATALOG, PointCloud, SceneSpec, generate_scene
from panoptiq.voxelizer import (FULL_GRID, RAW_FEATURE_DIM, VoxelConfig, build_targets, cart_to_cyl, devoxelize,
                                segment_centroids, voxelize)


def cloud_from(xyz, sem=None, inst=None):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    n = len(xyz)
    pts = np.concatenate([xyz, np.full((n, 1), 0.5)], axis=1)
    return PointCloud(pts, np.ones(n) if sem is None else sem, np.zeros(n) if inst is None else inst)


def cyl_point(rho, theta, z):
    return [rho * math.cos(theta), rho * math.sin(theta), z]


def test_cart_to_cyl_examples():
    r, t, z = cart_to_cyl(3.0, 4.0, 1.0)
    assert r == 5.0 and abs(t - 0.9272952180016122) < 1e-15 and z == 1.0
    assert cart_to_cyl(1.0, 0.0, 0.0) == (1.0, 0.0, 0.0)
    assert cart_to_cyl(-1.0, 0.0, 2.0) == (1.0, math.pi, 2.0)
    assert cart_to_cyl(0.0, 0.0, -3.0) == (0.0, 0.0, -3.0)
    assert cart_to_cyl(-1.0, -0.0, 0.0)[1] == math.pi


def test_full_size_grid_binning():
    scene = voxelize(cloud_from([cyl_point(5.0, 0.0, 0.0)]), FULL_GRID)
    assert tuple(scene.index[0]) == (48, 180, 21)


def test_rho_beyond_range_is_clamped():
    scene = voxelize(cloud_from([cyl_point(60.0, 0.1, 0.0)]), FULL_GRID)
    assert scene.index[0, 0] == 479
    assert scene.clamped[0]


def test_empty_cloud():
    scene = voxelize(PointCloud.empty())
    assert scene.num_voxels == 0
    assert scene.features.shape == (0, RAW_FEATURE_DIM)


def test_ascending_index_order_and_features():
    c = generate_scene(SceneSpec(seed=3))
    s = voxelize(c)
    key = (s.index[:, 0] * 36 + s.index[:, 1]) * 8 + s.index[:, 2]
    assert np.all(np.diff(key) > 0)
    assert s.features.shape == (s.num_voxels, RAW_FEATURE_DIM)
    assert np.all(np.isfinite(s.features))


def test_config_validation():
    with pytest.raises(ValueError):
        VoxelConfig(rho_range=(5.0, 5.0))
    with pytest.raises(ValueError):
        VoxelConfig(grid=(4, 0, 2))


def test_drop_mode_marks_points():
    cfg = VoxelConfig(drop_out_of_range=True)
    s = voxelize(cloud_from([cyl_point(60.0, 0.0, 0.0), cyl_point(10.0, 0.0, 0.0)]), cfg)
    assert s.num_voxels == 1
    assert list(s.point_voxel) == [-1, 0]


def test_single_instance_all_ones_mask():
    rng = np.random.default_rng(0)
    xyz = np.stack([rng.uniform(10, 12, 40), rng.uniform(-1, 1, 40), rng.uniform(-1, 0, 40)], axis=1)
    c = cloud_from(xyz, sem=np.ones(40), inst=np.full(40, 4))
    s = build_targets(voxelize(c), c, DEFAULT_CATALOG)
    assert s.masks.shape == (1, s.num_voxels) and s.masks.all()
    assert list(s.segment_classes) == [1] and list(s.segment_instances) == [4]


def test_majority_vote_three_to_one():
    xyz = [[10.0, 0.0, 0.0]] * 4
    catalog = DEFAULT_CATALOG.__class__({0: "x", 2: "a", 5: "b"}, frozenset(), frozenset({2, 5}))
    c = cloud_from(xyz, sem=[2, 2, 5, 2])
    s = build_targets(voxelize(c), c, catalog)
    assert list(s.semantic) == [2]


def test_majority_tie_goes_to_smaller_id():
    c = cloud_from([[10.0, 0.0, 0.0]] * 4, sem=[3, 2, 3, 2])
    s = build_targets(voxelize(c), c, DEFAULT_CATALOG)
    assert list(s.semantic) == [2]


def test_no_stuff_points_no_stuff_masks():
    c = cloud_from([[10.0, 0.0, 0.0], [20.0, 5.0, 0.0]], sem=[1, 1], inst=[1, 2])
    s = build_targets(voxelize(c), c, DEFAULT_CATALOG)
    assert list(s.segment_classes) == [1, 1]
    assert list(s.segment_instances) == [1, 2]


def test_devoxelize_uniform_label():
    c = generate_scene(SceneSpec(seed=1))
    s = voxelize(c)
    out = devoxelize(np.full(s.num_voxels, 3), s, c)
    assert np.all(out == 3) and len(out) == len(c)


def test_devoxelize_matches_lookup_table():
    xyz = [cyl_point(r, t, 0.0) for r, t in [(5, 0.0), (5.1, 0.01), (15, 1.0), (25, -2.0), (35, 2.5), (45, 3.0)]]
    c = cloud_from(xyz)
    s = voxelize(c)
    assert s.num_voxels == 5
    labels = np.array([[10, 1], [20, 2], [30, 3], [40, 4], [50, 5]])
    out = devoxelize(labels, s, c)
    expected = np.array([labels[s.point_voxel[i]] for i in range(len(c))])
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out[0], out[1])


def test_devoxelize_rejects_wrong_length():
    c = generate_scene(SceneSpec(seed=1))
    s = voxelize(c)
    with pytest.raises(ValueError):
        devoxelize(np.zeros(s.num_voxels + 1), s, c)


def random_cloud(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    xyz = np.stack([rng.uniform(-70, 70, n), rng.uniform(-70, 70, n), rng.uniform(-6, 4, n)], axis=1)
    sem = rng.integers(0, 4, n)
    inst = np.where(sem == 1, rng.integers(1, 6, n), 0)
    return cloud_from(xyz, sem, inst)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_partition_and_center_proximity(seed):
    c = random_cloud(seed)
    cfg = VoxelConfig()
    s = voxelize(c, cfg)
    assert int(s.counts.sum()) == len(c)
    assert np.all(s.point_voxel >= 0)
    rho, theta, z = cart_to_cyl(c.xyz[:, 0], c.xyz[:, 1], c.xyz[:, 2])
    cyl = np.stack([rho, theta, z], axis=1)
    centers = cfg.centers(s.index[s.point_voxel])
    inside = ~s.clamped
    assert np.all(np.abs(cyl - centers)[inside] <= cfg.pitch / 2 + 1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_masks_disjoint_and_cover_evaluated(seed):
    c = random_cloud(seed)
    s = build_targets(voxelize(c), c, DEFAULT_CATALOG)
    things = s.masks[s.segment_instances > 0]
    assert np.all(things.sum(axis=0) <= 1)
    assert np.all(s.masks.sum(axis=0) <= 1)
    evaluated = s.semantic != DEFAULT_CATALOG.ignore_id
    assert np.array_equal(s.masks.any(axis=0), evaluated)


def test_determinism():
    c = generate_scene(SceneSpec(seed=9))
    a, b = voxelize(c), voxelize(c)
    assert np.array_equal(a.index, b.index) and a.features.tobytes() == b.features.tobytes()


def test_segment_centroids_weighting():
    c = cloud_from([[10.0, 0.0, 0.0], [10.0, 0.0, 0.0], [30.0, 0.0, 0.0]], sem=[1, 1, 1], inst=[1, 1, 1])
    s = build_targets(voxelize(c), c, DEFAULT_CATALOG)
    np.testing.assert_allclose(segment_centroids(s)[0], [50 / 3, 0.0, 0.0])
