"""Per-cloud quality features: KDE density, grid uniformity, normal integrity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from cinet.geometry import NormalField, PointCloud, SpatialIndex, build_spatial_index, estimate_normals

FEATURE_NAMES = ("density", "uniformity", "integrity")

DEFAULT_GRID_RESOLUTION = 8
DEFAULT_NORMAL_K = 10
DEFAULT_INTEGRITY_K = 8
KDE_REL_TOL = 1e-6


@dataclass(frozen=True)
class QualityFeature:
    density: float
    uniformity: float
    integrity: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"quality feature must be finite, got {vals}")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not (0.0 <= self.uniformity <= 1.0 and 0.0 <= self.integrity <= 1.0):
            raise ValueError("uniformity and integrity must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.density, self.uniformity, self.integrity], dtype=np.float64)


def scott_bandwidth(points: np.ndarray) -> float:
    n = points.shape[0]
    sigma = float(np.mean(np.std(points, axis=0)))
    if sigma == 0.0:
        raise ValueError("bandwidth undefined: all points are identical")
    return sigma * n ** (-1.0 / 7.0)


def kde_cutoff(n: int, rel_tol: float = KDE_REL_TOL) -> float:
    """Truncation radius in bandwidth units.

    Every point's own kernel contributes 1 to its unnormalized sum, so
    dropping at most n terms below exp(-r^2/2) bounds the relative error by
    n*exp(-r^2/2). Never smaller than 5 bandwidths.
    """
    return max(5.0, math.sqrt(2.0 * math.log(max(n, 1) / rel_tol)))


def kde_density(cloud: PointCloud, bandwidth: float | str = "auto", chunk: int = 128):
    """Isotropic Gaussian KDE evaluated at every point.

    Returns ``(per_point, mean)``; values are probability densities per mm^3.
    """
    pts = cloud.points
    n = pts.shape[0]
    if bandwidth == "auto":
        h = scott_bandwidth(pts)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
    radius = kde_cutoff(n) * h
    tree = cKDTree(pts)
    sums = np.zeros(n)
    inv = 1.0 / (2.0 * h * h)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        sub = cKDTree(pts[start:stop])
        pairs = sub.sparse_distance_matrix(tree, radius, output_type="ndarray")
        d = pairs["v"]
        sums[start:stop] += np.bincount(pairs["i"], weights=np.exp(-(d * d) * inv), minlength=stop - start)
    norm = 1.0 / (n * (2.0 * math.pi) ** 1.5 * h**3)
    per_point = sums * norm
    return per_point, float(np.mean(per_point))


def kde_density_dense(points: np.ndarray, h: float) -> np.ndarray:
    """Untruncated O(n^2) evaluation, used as a reference."""
    n = points.shape[0]
    out = np.empty(n)
    for i in range(n):
        d2 = np.sum((points - points[i]) ** 2, axis=1)
        out[i] = np.sum(np.exp(-d2 / (2 * h * h)))
    return out / (n * (2 * math.pi) ** 1.5 * h**3)


def grid_cell_counts(points: np.ndarray, resolution: int = DEFAULT_GRID_RESOLUTION) -> np.ndarray:
    """Point counts over every cell of the AABB grid.

    The longest axis gets ``resolution`` cells; shorter axes get
    proportionally fewer (at least one) so cells stay roughly cubic on
    thin, plate-like scans.
    """
    if resolution < 1:
        raise ValueError("grid resolution must be >= 1")
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    longest = float(extent.max())
    if longest == 0.0:
        return np.array([points.shape[0]])
    cells = np.maximum(1, np.ceil(resolution * extent / longest - 1e-9)).astype(np.int64)
    safe = np.where(extent > 0, extent, 1.0)
    ijk = np.floor((points - lo) / safe * cells).astype(np.int64)
    ijk = np.clip(ijk, 0, cells - 1)
    flat = np.ravel_multi_index(ijk.T, tuple(cells))
    return np.bincount(flat, minlength=int(np.prod(cells)))


def grid_uniformity(cloud: PointCloud, grid_resolution: int = DEFAULT_GRID_RESOLUTION) -> float:
    """1 / (1 + coefficient of variation) of per-cell point counts."""
    counts = grid_cell_counts(cloud.points, grid_resolution).astype(np.float64)
    m = counts.mean()
    s = counts.std()
    return float(1.0 / (1.0 + s / m))


def normal_integrity(cloud: PointCloud, normals: NormalField | np.ndarray | None = None, k: int = DEFAULT_INTEGRITY_K,
                     index: SpatialIndex | None = None) -> float:
    """Mean |cos| between each normal and the normals of its k nearest neighbors."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if normals is None:
        normals = cloud.normals
    if normals is None:
        raise ValueError("normal_integrity requires normals")
    nrm = normals.normals if isinstance(normals, NormalField) else np.asarray(normals, dtype=np.float64)
    index = index or build_spatial_index(cloud)
    kk = min(k + 1, cloud.n_points)
    nbr, _ = index.query(cloud.points, kk)
    # Drop each point itself (rank 0 unless duplicates exist, then any self hit).
    own = np.arange(cloud.n_points)[:, None]
    mask = nbr != own
    keep = np.cumsum(mask, axis=1) <= k
    mask &= keep
    cos = np.abs(np.einsum("nj,nkj->nk", nrm, nrm[nbr]))
    per_point = np.sum(cos * mask, axis=1) / np.maximum(mask.sum(axis=1), 1)
    return float(np.clip(per_point.mean(), 0.0, 1.0))


def quality_vector(cloud: PointCloud, bandwidth: float | str = "auto", grid_resolution: int = DEFAULT_GRID_RESOLUTION,
                   normal_k: int = DEFAULT_NORMAL_K, integrity_k: int = DEFAULT_INTEGRITY_K) -> QualityFeature:
    index = build_spatial_index(cloud)
    _, density = kde_density(cloud, bandwidth)
    uniformity = grid_uniformity(cloud, grid_resolution)
    # Normals are always re-estimated: integrity scores the scanned surface itself.
    normals = estimate_normals(cloud, min(normal_k, cloud.n_points), index=index)
    integrity = normal_integrity(cloud, normals, integrity_k, index=index)
    return QualityFeature(density, uniformity, integrity)
