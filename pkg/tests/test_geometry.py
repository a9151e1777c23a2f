import numpy as np
import pytest
from hypothesis import given, strategies as st

from cinet.geometry import (PointCloud, SpatialIndex, estimate_normals, farthest_point_sample, knn_query,
                            orient_normals, voxel_downsample)
from conftest import brute_fps, brute_knn


def test_cloud_rejects_bad_input():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), labels=[0, 2])
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=[[1, 0, 0], [0, 0, 2]])


def test_cloud_is_read_only():
    c = PointCloud(np.random.default_rng(0).random((5, 3)), labels=[0, 1, 0, 0, 1])
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0
    with pytest.raises(ValueError):
        c.labels[0] = 1


@pytest.mark.parametrize("n,k", [(50, 1), (200, 8), (1000, 16), (30, 30), (10, 40)])
def test_knn_matches_brute_force(n, k):
    pts = np.random.default_rng(n + k).random((n, 3))
    index = SpatialIndex(pts)
    for a in range(0, n, max(1, n // 25)):
        idx, dist = knn_query(index, pts[a], k)
        ref_i, ref_d = brute_knn(pts, pts[a], k)
        assert np.array_equal(idx, ref_i)
        assert np.array_equal(dist, ref_d)


def test_knn_ties_break_by_index():
    # Integer lattice: many equidistant neighbors.
    g = np.arange(6, dtype=float)
    pts = np.array(np.meshgrid(g, g, g)).reshape(3, -1).T
    index = SpatialIndex(pts)
    for a in (0, 43, 107, 215):
        for k in (5, 7, 19):
            idx, dist = knn_query(index, pts[a], k)
            ref_i, ref_d = brute_knn(pts, pts[a], k)
            assert np.array_equal(idx, ref_i), (a, k)
            assert np.array_equal(dist, ref_d)


@given(st.integers(5, 120), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_knn_property(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.random((n, 3)) * 4) / 4  # coarse grid -> duplicates and ties
    anchor = rng.random(3)
    idx, dist = knn_query(SpatialIndex(pts), anchor, k)
    ref_i, ref_d = brute_knn(pts, anchor, k)
    assert np.array_equal(idx, ref_i)
    assert np.array_equal(dist, ref_d)
    assert np.all(np.diff(dist) >= 0)


def test_knn_invalid_k():
    with pytest.raises(ValueError):
        knn_query(SpatialIndex(np.zeros((3, 3))), np.zeros(3), 0)


@pytest.mark.parametrize("n,m", [(60, 10), (200, 25), (17, 17)])
def test_fps_matches_brute_force(n, m):
    pts = np.random.default_rng(n).random((n, 3))
    sel = farthest_point_sample(pts, m)
    first = int(np.argmax(np.sum((pts - pts.mean(0)) ** 2, axis=1)))
    assert np.array_equal(sel, brute_fps(pts, m, first))
    assert len(set(sel.tolist())) == m


def test_fps_random_start_reproducible():
    pts = np.random.default_rng(1).random((100, 3))
    a = farthest_point_sample(pts, 10, seed=5, random_start=True)
    b = farthest_point_sample(pts, 10, seed=5, random_start=True)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 101)


def _voxel_oracle(pts, labels, size):
    cells = {}
    for p, l in zip(pts, labels):
        cells.setdefault(tuple(np.floor(p / size).astype(int)), []).append((p, l))
    out = {}
    for key, items in cells.items():
        ps = np.array([p for p, _ in items])
        ls = [l for _, l in items]
        out[key] = (ps.mean(axis=0), int(2 * sum(ls) >= len(ls)), len(ls))
    return out


@pytest.mark.parametrize("size", [0.05, 0.2, 0.5])
def test_voxel_matches_oracle(size):
    rng = np.random.default_rng(7)
    pts = rng.random((500, 3))
    labels = (rng.random(500) < 0.2).astype(int)
    down = voxel_downsample(PointCloud(pts, labels), size)
    ref = _voxel_oracle(pts, labels, size)
    assert down.n_points == len(ref)
    for p, l in zip(down.points, down.labels):
        key = tuple(np.floor(p / size).astype(int))
        c, lab, _ = ref[key]
        assert np.allclose(p, c, rtol=0, atol=1e-12)
        assert l == lab


def test_voxel_tie_goes_to_defect():
    c = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], labels=[0, 1])
    assert voxel_downsample(c, 1.0).labels.tolist() == [1]


def test_normals_of_plane_point_up():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.random((300, 2)), np.zeros(300)])
    nf = estimate_normals(PointCloud(pts), k=10)
    assert np.allclose(nf.normals, [0, 0, 1], atol=1e-9)
    assert not nf.degenerate.any()


def test_normals_tilted_plane():
    rng = np.random.default_rng(2)
    xy = rng.random((300, 2))
    pts = np.column_stack([xy, 0.5 * xy[:, 0]])
    nf = estimate_normals(PointCloud(pts), k=12)
    expect = np.array([-0.5, 0, 1]) / np.sqrt(1.25)
    assert np.allclose(nf.normals, expect, atol=1e-9)


def test_orientation_rules():
    n = orient_normals(np.array([[0, 0, -1.0], [-1.0, 0, 0], [0, -1.0, 0], [0.6, 0, -0.8]]))
    assert np.allclose(n, [[0, 0, 1], [1, 0, 0], [0, 1, 0], [-0.6, 0, 0.8]])


def test_degenerate_neighbourhood_flagged():
    pts = np.zeros((12, 3))
    nf = estimate_normals(PointCloud(pts), k=10)
    assert nf.degenerate.all()
    assert np.allclose(nf.normals, [0, 0, 1])
