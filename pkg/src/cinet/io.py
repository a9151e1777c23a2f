"""ASCII PLY and XYZ readers/writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from cinet.geometry import PointCloud

FORMATS = ("ply-ascii", "xyz")


class PointCloudFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"{msg} at line {line}" if line is not None else msg)


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply-ascii"
    if suffix in (".xyz", ".txt"):
        return "xyz"
    raise ValueError(f"cannot infer point-cloud format from {path!s}")


def _check_label(value: float, line: int) -> int:
    if value not in (0.0, 1.0):
        raise PointCloudFormatError("label outside {0,1}", line)
    return int(value)


def _parse_numbers(tokens, line):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise PointCloudFormatError(f"non-numeric field in {' '.join(tokens)!r}", line) from None


def _read_xyz(path) -> PointCloud:
    points, labels = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (3, 4):
                raise PointCloudFormatError(f"expected 3 or 4 fields, got {len(tokens)}", lineno)
            vals = _parse_numbers(tokens, lineno)
            points.append(vals[:3])
            if len(vals) == 4:
                labels.append(_check_label(vals[3], lineno))
            elif labels:
                raise PointCloudFormatError("label column missing", lineno)
    if not points:
        raise PointCloudFormatError("zero points in file")
    if labels and len(labels) != len(points):
        raise PointCloudFormatError("label column present on only some lines")
    return PointCloud(np.array(points), np.array(labels) if labels else None, source_id=Path(path).stem)


def _read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PointCloudFormatError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        head = tokens[0]
        if head == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise PointCloudFormatError(f"unsupported format {' '.join(tokens[1:])!r}", lineno)
        elif head in ("comment", "obj_info"):
            continue
        elif head == "element":
            if len(tokens) != 3:
                raise PointCloudFormatError("malformed element line", lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise PointCloudFormatError("malformed vertex count", lineno) from None
        elif head == "property":
            if len(tokens) != 3:
                raise PointCloudFormatError("malformed property line", lineno)
            if in_vertex:
                props.append(tokens[2])
        elif head == "end_header":
            body_start = lineno
            break
        else:
            raise PointCloudFormatError(f"unexpected header keyword {head!r}", lineno)
    if body_start is None:
        raise PointCloudFormatError("missing end_header")
    if n_vertex is None:
        raise PointCloudFormatError("missing 'element vertex'")
    for required in ("x", "y", "z"):
        if required not in props:
            raise PointCloudFormatError(f"missing required property {required!r}")
    if n_vertex < 1:
        raise PointCloudFormatError("zero points in file")
    col = {name: i for i, name in enumerate(props)}
    rows = []
    lineno = body_start
    for raw in lines[body_start:]:
        lineno += 1
        tokens = raw.split()
        if not tokens:
            continue
        if len(rows) == n_vertex:
            break
        if len(tokens) != len(props):
            raise PointCloudFormatError(f"expected {len(props)} fields, got {len(tokens)}", lineno)
        vals = _parse_numbers(tokens, lineno)
        if "label" in col:
            _check_label(vals[col["label"]], lineno)
        rows.append(vals)
    if len(rows) < n_vertex:
        raise PointCloudFormatError(f"header declares {n_vertex} vertices, file has {len(rows)}")
    data = np.array(rows, dtype=np.float64)
    points = data[:, [col["x"], col["y"], col["z"]]]
    labels = data[:, col["label"]].astype(np.int64) if "label" in col else None
    normals = None
    if all(c in col for c in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    extras = {name: data[:, i] for name, i in col.items() if name not in ("x", "y", "z", "nx", "ny", "nz", "label")}
    meta = {"properties": extras} if extras else {}
    return PointCloud(points, labels, normals, source_id=Path(path).stem, meta=meta)


def load_point_cloud(path, format: str | None = None) -> PointCloud:
    fmt = format or infer_format(path)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "ply-ascii":
        return _read_ply(path)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_point_cloud(cloud: PointCloud, path, format: str | None = None, extra: dict | None = None) -> None:
    """Write a cloud. ``extra`` maps property names to per-point arrays (PLY only).

    Integer-valued extras are written as ``uchar``; floats as ``double``.
    Coordinates use shortest round-trip repr, so reload is exact.
    """
    fmt = format or infer_format(path)
    n = cloud.n_points
    if fmt == "xyz":
        with open(path, "w") as fh:
            for i in range(n):
                row = " ".join(_fmt(v) for v in cloud.points[i])
                if cloud.labels is not None:
                    row += f" {int(cloud.labels[i])}"
                fh.write(row + "\n")
        return
    if fmt != "ply-ascii":
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    cols = [cloud.points]
    header = ["ply", "format ascii 1.0"]
    if cloud.source_id:
        header.append(f"comment source {cloud.source_id}")
    header += [f"element vertex {n}", "property double x", "property double y", "property double z"]
    if cloud.normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
        cols.append(cloud.normals)
    float_extra, int_extra = [], []
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr).reshape(-1)
        if arr.shape[0] != n:
            raise ValueError(f"extra property {name!r} has {arr.shape[0]} values, expected {n}")
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            int_extra.append((name, arr.astype(np.int64)))
        else:
            float_extra.append((name, arr.astype(np.float64)))
    for name, _ in float_extra:
        header.append(f"property double {name}")
    if cloud.labels is not None:
        header.append("property uchar label")
    for name, _ in int_extra:
        header.append(f"property uchar {name}")
    header.append("end_header")
    floats = np.hstack(cols + [a[:, None] for _, a in float_extra])
    ints = [cloud.labels] if cloud.labels is not None else []
    ints += [a for _, a in int_extra]
    ints = np.stack(ints, axis=1) if ints else np.zeros((n, 0), dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(n):
            parts = [_fmt(v) for v in floats[i]] + [str(int(v)) for v in ints[i]]
            fh.write(" ".join(parts) + "\n")
