import numpy as np
import pytest
from hypothesis import given, strategies as st

from cinet import autodiff as ad
from cinet.autodiff import check_gradients
from cinet.geometry import PointCloud
from cinet.structural import (build_structure, crop_structure, default_n_groups, embed_points, encode_structure,
                              group_points, init_encoder, point_tokens)
from conftest import brute_knn, plate_points


def test_default_group_count():
    assert default_n_groups(20_000) == 512
    assert default_n_groups(1000) == 31
    assert default_n_groups(100) == 16
    assert default_n_groups(10) == 10


def test_groups_are_knn_of_fps_keypoints():
    pts = plate_points(300, seed=1)
    g = group_points(PointCloud(pts), 12, 10)
    for key, mem, loc in zip(g.keypoints, g.members, g.local):
        ref, _ = brute_knn(pts, pts[key], 10)
        assert np.array_equal(mem, ref)
        assert mem[0] == key
        assert np.array_equal(loc, pts[mem] - pts[key])


def test_every_point_has_one_slot():
    s = build_structure(PointCloud(plate_points(500, seed=2)), 16, 12)
    g, k = s.groups.n_groups, s.groups.k
    assert np.array_equal(np.sort(s.slot), np.sort(np.unique(s.slot)))
    member = s.slot < g * k
    flat_members = s.groups.members.reshape(-1)
    assert np.array_equal(flat_members[s.slot[member]], np.flatnonzero(member))
    assert np.array_equal(np.flatnonzero(~member), s.outsiders)


def test_group_bounds():
    with pytest.raises(ValueError):
        group_points(PointCloud(plate_points(20)), 0, 4)
    with pytest.raises(ValueError):
        group_points(PointCloud(plate_points(20)), 4, 21)
    with pytest.raises(ValueError):
        init_encoder(d_model=10, n_heads=3)


def _params(kind="transformer", d=16):
    return init_encoder(d_model=d, n_layers=2, n_heads=2, seed=3, kind=kind, coord_scale=np.array([4.0, 4.0, 30.0]))


@pytest.mark.parametrize("kind", ["transformer", "mlp"])
def test_member_permutation_invariance(kind):
    s = build_structure(PointCloud(plate_points(256, seed=4)), 8, 16)
    p = _params(kind)
    rows = encode_structure(s, p).rows.data
    rng = np.random.default_rng(0)
    perm = np.stack([rng.permutation(16) for _ in range(8)])
    local = np.take_along_axis(s.groups.local, perm[:, :, None], axis=1)
    from cinet.structural import encode_groups, mlp_encode_groups

    fn = encode_groups if kind == "transformer" else mlp_encode_groups
    rows_p = fn(embed_points(local, p), p).rows.data
    assert np.max(np.abs(rows - rows_p)) <= 1e-12


def test_translation_invariance_exact():
    # Dyadic coordinates and integer shifts keep every subtraction exact.
    rng = np.random.default_rng(5)
    pts = np.round(plate_points(256, seed=5) * 1024) / 1024
    pts[:, 2] += rng.integers(0, 4, 256) / 1024
    p = _params()
    a = build_structure(PointCloud(pts), 8, 16)
    b = build_structure(PointCloud(pts + np.array([7.0, -3.0, 2.0])), 8, 16)
    ta = point_tokens(encode_structure(a, p), a).data
    tb = point_tokens(encode_structure(b, p), b).data
    assert np.array_equal(ta, tb)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-5, 5))
def test_translation_invariance_float(dx, dy, dz):
    pts = plate_points(128, seed=6)
    p = _params()
    a = build_structure(PointCloud(pts), 4, 16)
    b = build_structure(PointCloud(pts + [dx, dy, dz]), 4, 16)
    assert np.array_equal(a.groups.members, b.groups.members)
    ta = point_tokens(encode_structure(a, p), a).data
    tb = point_tokens(encode_structure(b, p), b).data
    assert np.max(np.abs(ta - tb)) < 1e-6


def test_outsiders_do_not_change_members():
    s = build_structure(PointCloud(plate_points(400, seed=7)), 8, 16)
    assert s.outsiders.size > 0
    p = _params()
    full = encode_structure(s, p)
    from cinet.structural import encode_groups

    alone = encode_groups(embed_points(s.groups.local, p), p)
    assert np.array_equal(full.tokens.data, alone.tokens.data)
    assert np.array_equal(full.rows.data, alone.rows.data)


def test_crop_matches_full_forward():
    s = build_structure(PointCloud(plate_points(400, seed=8)), 10, 16)
    p = _params()
    full = point_tokens(encode_structure(s, p), s).data
    sel = np.array([7, 2, 5])
    cs, pts = crop_structure(s, sel)
    assert np.array_equal(pts, np.flatnonzero(np.isin(s.assign, sel)))
    part = point_tokens(encode_structure(cs, p), cs).data
    assert np.max(np.abs(part - full[pts])) <= 1e-12


@pytest.mark.parametrize("kind", ["transformer", "mlp"])
def test_encoder_gradients(kind):
    s = build_structure(PointCloud(plate_points(256, seed=9)), 8, 16)
    p = _params(kind)
    w = np.random.default_rng(1).standard_normal((256, 16))

    def f():
        return ad.sum(point_tokens(encode_structure(s, p), s) * w)

    assert check_gradients(f, [t for _, t in p.named()], max_coords=6) < 1e-4
