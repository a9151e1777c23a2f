"""Point-cloud container, exact k-NN index, sampling and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointCloud:
    """Positions in millimeters with optional per-point labels and normals.

    Arrays are copied and made read-only on construction.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    normals: np.ndarray | None = None
    source_id: str = ""
    unit: str = "mm"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3) if np.size(self.points) else np.zeros((0, 3))
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        n = pts.shape[0]
        if self.labels is not None:
            lab = np.array(self.labels).reshape(-1)
            if lab.shape[0] != n:
                raise ValueError(f"expected {n} labels, got {lab.shape[0]}")
            if not np.all((lab == 0) | (lab == 1)):
                raise ValueError("labels must be 0 (normal) or 1 (defect)")
            lab = lab.astype(np.int64)
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape[0] != n:
                raise ValueError(f"expected {n} normals, got {nrm.shape[0]}")
            if not np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) <= 1e-6):
                raise ValueError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.labels is None else self.labels[idx],
            None if self.normals is None else self.normals[idx],
            self.source_id,
            self.unit,
            dict(self.meta),
        )

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, labels, self.normals, self.source_id, self.unit, dict(self.meta))

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.labels, None, self.source_id, self.unit, dict(self.meta))


def _pair_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Single distance formula shared by the index and its oracles.
    d = a - b
    return np.sqrt(np.sum(d * d, axis=-1))


class SpatialIndex:
    """Exact k-NN over a fixed point set.

    Candidates come from a kd-tree; distances are recomputed with one fixed
    formula and ranked by (distance, index), so ties resolve to the lowest
    index regardless of tree traversal order.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self.n = pts.shape[0]
        self._tree = cKDTree(pts)

    def query(self, anchors, k: int):
        """Return ``(indices, distances)`` of shape ``(m, min(k, n))``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
        kk = min(k, self.n)
        m = anchors.shape[0]
        if kk == self.n:
            cand = np.broadcast_to(np.arange(self.n), (m, self.n))
            return self._rank(anchors, cand, kk)
        extra = min(kk + 4, self.n)
        _, cand = self._tree.query(anchors, k=extra)
        cand = np.asarray(cand).reshape(m, extra)
        idx, dist = self._rank(anchors, cand, extra)
        out_i = idx[:, :kk].copy()
        out_d = dist[:, :kk].copy()
        if extra == self.n:
            return out_i, out_d
        # The k-th and the first excluded candidate may tie, or the tree may
        # have dropped an equidistant point; resolve those rows by radius search.
        kth = dist[:, kk - 1]
        last = dist[:, extra - 1]
        suspect = np.nonzero(last <= kth * (1 + 1e-9) + 1e-12)[0]
        for r in suspect:
            ball = self._tree.query_ball_point(anchors[r], kth[r] * (1 + 1e-9) + 1e-12)
            ball = np.asarray(sorted(ball), dtype=np.int64)
            bi, bd = self._rank(anchors[r : r + 1], ball[None, :], kk)
            out_i[r] = bi[0]
            out_d[r] = bd[0]
        return out_i, out_d

    def _rank(self, anchors, cand, keep):
        d = _pair_distance(self.points[cand], anchors[:, None, :])
        order = np.lexsort((cand, d), axis=-1)[:, :keep]
        return np.take_along_axis(np.asarray(cand), order, axis=1), np.take_along_axis(d, order, axis=1)


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def knn_query(index: SpatialIndex, anchor, k: int):
    """Ordered neighbors of a single anchor: ``(indices, distances)``."""
    idx, dist = index.query(np.asarray(anchor, dtype=np.float64).reshape(1, 3), k)
    return idx[0], dist[0]


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Voxel labels are the majority label, with ties going to defect so rare
    defect points survive.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = counts.shape[0]
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    labels = None
    if cloud.labels is not None:
        defects = np.bincount(inverse, weights=cloud.labels, minlength=n_vox)
        labels = (2 * defects >= counts).astype(np.int64)
    meta = dict(cloud.meta)
    meta["voxel_size"] = voxel_size
    return PointCloud(centroids, labels, None, cloud.source_id, cloud.unit, meta)


def farthest_point_sample(cloud_or_points, n_samples: int, seed: int | None = None, random_start: bool = False) -> np.ndarray:
    """Greedy max-min keypoint selection.

    The first keypoint is the point farthest from the centroid unless
    ``random_start`` is set, in which case it is drawn with ``seed``.
    Ties go to the lowest index.
    """
    pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else np.asarray(cloud_or_points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= n_samples <= n:
        raise ValueError(f"n_samples must be in [1, {n}], got {n_samples}")
    if random_start:
        first = int(np.random.default_rng(seed).integers(n))
    else:
        centroid = pts.mean(axis=0)
        first = int(np.argmax(np.sum((pts - centroid) ** 2, axis=1)))
    selected = np.empty(n_samples, dtype=np.int64)
    selected[0] = first
    min_d = np.sum((pts - pts[first]) ** 2, axis=1)
    for i in range(1, n_samples):
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        np.minimum(min_d, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d)
    return selected


@dataclass(frozen=True)
class NormalField:
    normals: np.ndarray
    k: int
    degenerate: np.ndarray

    def __len__(self):
        return self.normals.shape[0]


def orient_normals(normals: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip normals toward +Z; in-plane normals fall back to +X, then +Y."""
    nrm = np.array(normals, dtype=np.float64)
    nrm[np.abs(nrm) <= tol] = 0.0
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    # First non-zero component among (z, x, y) decides the sign.
    key = np.where(nrm[:, 2] != 0, nrm[:, 2], np.where(nrm[:, 0] != 0, nrm[:, 0], nrm[:, 1]))
    nrm[key < 0] *= -1
    return nrm


def estimate_normals(cloud: PointCloud, k: int = 10, index: SpatialIndex | None = None) -> NormalField:
    """PCA plane-fit normals over each point's k-neighborhood."""
    n = cloud.n_points
    if k < 3:
        raise ValueError("k must be >= 3")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    index = index or build_spatial_index(cloud)
    nbr, _ = index.query(cloud.points, k)
    nb = cloud.points[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    degenerate = np.all(np.abs(centered) == 0, axis=(1, 2))
    normals[degenerate] = (0.0, 0.0, 1.0)
    return NormalField(orient_normals(normals), k, degenerate)
