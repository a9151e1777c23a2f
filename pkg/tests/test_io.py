import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cinet.config import format_ini, from_mapping, read_ini
from cinet.geometry import PointCloud
from cinet.io import PointCloudFormatError, infer_format, load_point_cloud, save_point_cloud
from cinet.pipeline import TrainConfig

coords = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)),
                elements=st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False))


@given(coords, st.integers(0, 2**31 - 1))
def test_ply_round_trip_exact(tmp_path_factory, pts, seed):
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    lab = np.random.default_rng(seed).integers(0, 2, len(pts))
    save_point_cloud(PointCloud(pts, lab, source_id="c"), path)
    back = load_point_cloud(path)
    assert np.array_equal(back.points, pts)
    assert np.array_equal(back.labels, lab)


def test_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(0).random((20, 3))
    save_point_cloud(PointCloud(pts, np.arange(20) % 2), tmp_path / "c.xyz")
    back = load_point_cloud(tmp_path / "c.xyz")
    assert np.array_equal(back.points, pts) and back.labels.tolist() == (np.arange(20) % 2).tolist()


def test_ply_extras_and_normals(tmp_path):
    pts = np.random.default_rng(1).random((5, 3))
    nrm = np.tile([0.0, 0.0, 1.0], (5, 1))
    save_point_cloud(PointCloud(pts, [0, 1, 0, 0, 1], nrm), tmp_path / "e.ply",
                     extra={"prob": np.linspace(0, 1, 5), "pred": np.array([0, 1, 0, 1, 1])})
    back = load_point_cloud(tmp_path / "e.ply")
    assert np.array_equal(back.normals, nrm)
    assert np.array_equal(back.meta["properties"]["prob"], np.linspace(0, 1, 5))
    assert back.meta["properties"]["pred"].tolist() == [0, 1, 0, 1, 1]


@pytest.mark.parametrize("body,line", [
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n0 0 0\n1 1\n", 9),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
     "property uchar label\nend_header\n0 0 0 3\n", 9),
    ("ply\nformat binary_little_endian 1.0\n", 2),
])
def test_malformed_ply_names_line(tmp_path, body, line):
    path = tmp_path / "bad.ply"
    path.write_text(body)
    with pytest.raises(PointCloudFormatError) as err:
        load_point_cloud(path)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_other_format_errors(tmp_path):
    (tmp_path / "a.xyz").write_text("1 2\n")
    with pytest.raises(PointCloudFormatError):
        load_point_cloud(tmp_path / "a.xyz")
    (tmp_path / "b.ply").write_text("ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n")
    with pytest.raises(PointCloudFormatError):
        load_point_cloud(tmp_path / "b.ply")
    with pytest.raises(ValueError):
        infer_format("cloud.las")


def test_config_overlay():
    sections = read_ini("lr = 0.5\nepochs = 3\nintervention = plugin\npositive_weight = None\n", "train",
                        is_text=True)
    cfg = from_mapping(TrainConfig, sections["train"])
    assert (cfg.lr, cfg.epochs, cfg.intervention, cfg.positive_weight) == (0.5, 3, "plugin", None)
    with pytest.raises(ValueError):
        from_mapping(TrainConfig, {"learning_rate": "1"})
    with pytest.raises(ValueError):
        from_mapping(TrainConfig, {"epochs": "many"})
    text = format_ini({"train": cfg})
    again = from_mapping(TrainConfig, read_ini(text, is_text=True)["train"])
    assert again == cfg
