import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_voxel_keys
from sparsepad.grid import (
    GridSpec,
    PointCloud,
    SparseTensor,
    VoxelKey,
    containing_voxel_key,
    downsample_key,
    downsample_keys,
    read_points,
    voxel_center,
    voxelize,
    write_points,
)

ints = st.integers(min_value=-1000, max_value=1000)


@pytest.mark.parametrize("p, key", [
    ((0.3, 0.3, 0.3), (0, 0, 0)),
    ((-0.1, 0.0, 0.0), (-1, 0, 0)),
    ((2.0, 2.0, 2.0), (2, 2, 2)),
])
def test_containing_voxel_key(unit_spec, p, key):
    assert containing_voxel_key(p, unit_spec)[:3] == key


def test_voxel_center():
    assert np.allclose(voxel_center((0, 0, 0), GridSpec()), (0.5, 0.5, 0.5))
    assert np.allclose(voxel_center((-1, 0, 2), GridSpec(voxel_size=0.5)), (-0.25, 0.25, 1.25))


@given(ints, ints, ints, st.sampled_from([0.5, 1.0, 1 / 40, 3.0]))
def test_center_round_trip(i, j, k, s):
    spec = GridSpec((-1.0, 0.25, 3.0), s)
    assert containing_voxel_key(voxel_center((i, j, k), spec), spec)[:3] == (i, j, k)


@pytest.mark.parametrize("key, expected", [
    ((3, 5, -1), (1, 2, -1)),
    ((-2, -3, 0), (-1, -2, 0)),
    ((0, 0, 0), (0, 0, 0)),
])
def test_downsample_key(key, expected):
    assert downsample_key(VoxelKey(*key))[:3] == expected


@given(ints, ints, ints, st.integers(0, 6))
def test_repeated_downsample_is_floor_division(i, j, k, levels):
    key = VoxelKey(i, j, k)
    for _ in range(levels):
        key = downsample_key(key)
    assert key[:3] == (i // 2 ** levels, j // 2 ** levels, k // 2 ** levels)
    assert tuple(downsample_keys([[0, i, j, k]], levels)[0, 1:]) == key[:3]


def test_voxelize_mean_and_indicator():
    cloud = PointCloud([[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.7]], features=[[1.0], [2.0], [3.0]])
    t = voxelize(cloud, GridSpec())
    assert len(t) == 1
    assert np.allclose(t.features[0], (2.0, 1.0))
    assert not t.padded.any()


def test_voxelize_two_voxels():
    t = voxelize(PointCloud([[0.1, 0.1, 0.1], [1.9, 1.9, 1.9]]), GridSpec())
    assert t.keys[:, 1:].tolist() == [[0, 0, 0], [1, 1, 1]]


def test_voxelize_sphere_matches_sort_dedupe_oracle():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((10_000, 3))
    pts = v / np.linalg.norm(v, axis=1, keepdims=True)
    spec = GridSpec((-1.0, -1.0, -1.0), 1 / 40)
    t = voxelize(PointCloud(pts), spec)
    expected = brute_voxel_keys(pts, 1 / 40, (-1.0, -1.0, -1.0))
    assert len(t) == len(expected)
    assert [tuple(k) for k in t.keys[:, 1:]] == expected


def test_voxelize_rejects_bad_input():
    with pytest.raises(ValueError):
        voxelize(PointCloud(np.zeros((0, 3))), GridSpec())
    with pytest.raises(ValueError):
        voxelize(PointCloud([[np.nan, 0, 0]]), GridSpec())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2 ** 31))
def test_voxelize_permutation_invariant_and_complete(n, seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.random((n, 3)) * 5 - 1, features=rng.random((n, 2)))
    spec = GridSpec((-1.0, -1.0, -1.0), 0.7)
    a = voxelize(cloud, spec)
    b = voxelize(cloud.permuted(rng.permutation(n)), spec)
    assert np.array_equal(a.keys, b.keys)
    assert np.allclose(a.features, b.features, atol=1e-12)
    assert np.all(a.contains(np.column_stack([np.zeros(n, int), np.floor((cloud.points + 1) / 0.7)])))
    assert np.all(a.features[:, -1] == 1)


def test_sparse_tensor_rejects_duplicates():
    with pytest.raises(ValueError):
        SparseTensor(GridSpec(), [[0, 1, 1, 1], [0, 1, 1, 1]], np.zeros((2, 1)))


def test_batch_major_order_and_lookup():
    keys = [[1, 0, 0, 0], [0, 5, 5, 5], [0, -3, 0, 0]]
    t = SparseTensor(GridSpec(), keys, np.arange(3.0)[:, None])
    assert t.keys.tolist() == [[0, -3, 0, 0], [0, 5, 5, 5], [1, 0, 0, 0]]
    assert t.lookup([[1, 0, 0, 0], [0, 0, 0, 0]]).tolist() == [2, -1]
    assert t.index[VoxelKey(5, 5, 5, 0)] == 1


def test_point_file_round_trip(tmp_path):
    cloud = PointCloud([[0.1, 0.2, 0.3], [-1.5, 2.0, 1e-3]], features=[[1.0, 2.0], [3.0, 4.5]], labels=[3, 0])
    path = tmp_path / "c.xyz"
    write_points(path, cloud)
    back = read_points(path)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.labels, cloud.labels)
    assert np.array_equal(back.features, cloud.features)


def test_point_file_without_header(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\n0 0 0 1 0.5\n1 1 1 0 0.25  # trailing\n\n")
    c = read_points(path)
    assert c.labels.tolist() == [1, 0]
    assert c.features[:, 0].tolist() == [0.5, 0.25]
