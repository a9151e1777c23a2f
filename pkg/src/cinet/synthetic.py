"""Synthetic ceramic-substrate scans with rare surface defects and scan artifacts.

A plate is sampled on a jittered grid, raised circuit traces are extruded on
top, and defects displace points along z (holes also delete points). Every
point a defect moves is labeled 1. Scan artifacts then remove stripes of
points (occlusion) and flip labels of normal points near defect boundaries
(aggregation error). x/y coordinates are never changed by defects, so
footprint containment can be checked directly.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from cinet.config import format_ini, from_mapping, read_ini
from cinet.geometry import PointCloud
from cinet.io import save_point_cloud

DEFECT_KINDS = ("scratch", "hole", "bump", "stain")
# Displacement at a footprint edge as a fraction of the peak, so a labeled
# point always differs from the plate by well over the scan noise.
EDGE = 0.5
BUMP_EDGE = 0.4
MIN_POINTS, MAX_POINTS = 10_000, 1_000_000


def cloud_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for cloud ``index`` of a dataset."""
    return np.random.Generator(np.random.PCG64DXSM(np.random.SeedSequence([master_seed, index])))


@dataclass
class SubstrateSpec:
    extent_x: float = 10.0  # mm
    extent_y: float = 8.0
    pitch: float = 0.063
    jitter: float = 0.3  # fraction of the pitch
    trace_count: int = 4
    trace_width: float = 0.4
    trace_height: float = 0.05
    noise_sigma: float = 0.004
    seed: int = 0

    def grid_shape(self) -> tuple:
        return int(math.floor(self.extent_x / self.pitch)) + 1, int(math.floor(self.extent_y / self.pitch)) + 1

    def validate(self):
        if not (self.extent_x > 0 and self.extent_y > 0 and self.pitch > 0):
            raise ValueError("extent and pitch must be positive")
        nx, ny = self.grid_shape()
        if not MIN_POINTS <= nx * ny <= MAX_POINTS:
            raise ValueError(f"extent/pitch give {nx * ny} points; allowed range is {MIN_POINTS}..{MAX_POINTS}")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")
        if self.noise_sigma < 0 or self.trace_count < 0 or self.trace_width < 0:
            raise ValueError("noise, trace count and width must be non-negative")


def generate_substrate(spec: SubstrateSpec, rng: np.random.Generator | None = None) -> PointCloud:
    spec.validate()
    rng = rng or cloud_rng(spec.seed, 0)
    nx, ny = spec.grid_shape()
    gx, gy = np.meshgrid(np.arange(nx) * spec.pitch, np.arange(ny) * spec.pitch, indexing="ij")
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    xy += rng.uniform(-spec.jitter, spec.jitter, size=xy.shape) * spec.pitch
    xy = np.clip(xy, 0.0, [spec.extent_x, spec.extent_y])
    z = np.zeros(xy.shape[0])
    for _ in range(spec.trace_count):
        # Axis-aligned trace running across the plate.
        axis = int(rng.integers(2))
        span = (spec.extent_y, spec.extent_x)[axis]
        centre = rng.uniform(0.1, 0.9) * span
        on = np.abs(xy[:, 1 - axis] - centre) < spec.trace_width / 2
        z[on] = spec.trace_height
    if spec.noise_sigma > 0:
        z = z + rng.normal(0.0, spec.noise_sigma, size=z.shape)
    pts = np.column_stack([xy, z])
    return PointCloud(pts, labels=np.zeros(pts.shape[0], dtype=np.uint8), unit="mm")


@dataclass
class DefectSpec:
    kinds: tuple[str, ...] = DEFECT_KINDS
    max_count: int = 6
    fraction_low: float = 0.001
    fraction_high: float = 0.01
    target_fraction: float = 0.0  # 0: uniform inside the band
    size_scale: float = 1.0
    scratch_width: float = 0.16
    scratch_length: float = 2.0
    scratch_depth: float = 0.05
    hole_radius: float = 0.25
    hole_rim: float = 0.12
    hole_rim_depth: float = 0.03
    bump_radius: float = 0.35
    bump_height: float = 0.06
    stain_radius: float = 0.4
    stain_noise: float = 0.025

    def validate(self):
        bad = set(self.kinds) - set(DEFECT_KINDS)
        if bad or not self.kinds:
            raise ValueError(f"defect kinds must be a non-empty subset of {DEFECT_KINDS}")
        if not 0 <= self.fraction_low <= self.fraction_high <= 1:
            raise ValueError("need 0 <= fraction_low <= fraction_high <= 1")
        if self.max_count < 0:
            raise ValueError("max_count must be >= 0")


@dataclass
class Defect:
    kind: str
    centre: tuple
    radius: float  # footprint radius (half width for scratches)
    path: np.ndarray | None = None  # scratch polyline vertices (m, 2)


def _segment_distance(xy: np.ndarray, path: np.ndarray) -> np.ndarray:
    best = np.full(xy.shape[0], np.inf)
    for a, b in zip(path[:-1], path[1:]):
        ab = b - a
        t = np.clip(((xy - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(xy - (a + t[:, None] * ab), axis=1))
    return best


def _sample_defect(kind: str, spec: DefectSpec, extent, rng) -> Defect:
    s = spec.size_scale * rng.uniform(0.7, 1.3)
    r_map = {"scratch": spec.scratch_width / 2, "hole": spec.hole_radius + spec.hole_rim,
             "bump": spec.bump_radius, "stain": spec.stain_radius}
    r = r_map[kind] * s
    reach = r + (spec.scratch_length * s if kind == "scratch" else 0.0)
    if 2 * reach >= min(extent):
        raise ValueError(f"{kind} defect ({2 * reach:.3g} mm) does not fit on the plate")
    lo, hi = np.array([reach, reach]), np.array(extent) - reach
    centre = rng.uniform(lo, hi)
    path = None
    if kind == "scratch":
        n_seg = int(rng.integers(1, 4))
        step = spec.scratch_length * s / n_seg
        pts = [centre]
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(n_seg):
            heading += rng.uniform(-0.6, 0.6)
            pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
        path = np.array(pts)
        path = path - path.mean(axis=0) + centre
    return Defect(kind, tuple(centre), r, path)


def defect_footprint(defect: Defect, xy: np.ndarray) -> np.ndarray:
    """Boolean mask of points whose geometry the defect modifies."""
    if defect.kind == "scratch":
        return _segment_distance(xy, defect.path) < defect.radius
    return np.linalg.norm(xy - np.asarray(defect.centre), axis=1) < defect.radius


def _apply_defect(defect: Defect, spec: DefectSpec, pts: np.ndarray, rng) -> tuple:
    """Displace points in place; returns (modified mask, delete mask)."""
    xy = pts[:, :2]
    keep_mask = np.zeros(pts.shape[0], dtype=bool)
    scale = defect.radius / {"scratch": spec.scratch_width / 2, "hole": spec.hole_radius + spec.hole_rim,
                             "bump": spec.bump_radius, "stain": spec.stain_radius}[defect.kind]
    if defect.kind == "scratch":
        d = _segment_distance(xy, defect.path)
        inside = d < defect.radius
        pts[inside, 2] -= spec.scratch_depth * (EDGE + (1.0 - EDGE) * (1.0 - (d[inside] / defect.radius) ** 2))
        return inside, keep_mask
    d = np.linalg.norm(xy - np.asarray(defect.centre), axis=1)
    inside = d < defect.radius
    if defect.kind == "hole":
        r_hole = spec.hole_radius * scale
        rim = inside & (d >= r_hole)
        t = (d[rim] - r_hole) / (defect.radius - r_hole)
        pts[rim, 2] -= spec.hole_rim_depth * (EDGE + (1.0 - EDGE) * (1.0 - t))
        return rim, inside & (d < r_hole)
    if defect.kind == "bump":
        sig = defect.radius / 2
        g = np.exp(-d[inside] ** 2 / (2 * sig**2))
        edge = math.exp(-2.0)
        pts[inside, 2] += spec.bump_height * (BUMP_EDGE + (1.0 - BUMP_EDGE) * (g - edge) / (1 - edge))
        return inside, keep_mask
    # stain: amplified roughness; magnitudes start at half the noise scale
    m = int(inside.sum())
    sign = np.where(rng.uniform(size=m) < 0.5, -1.0, 1.0)
    pts[inside, 2] += sign * spec.stain_noise * (0.5 + np.abs(rng.normal(size=m)))
    return inside, keep_mask


def inject_defects(cloud: PointCloud, spec: DefectSpec, rng: np.random.Generator | int, extent=None) -> PointCloud:
    """Add defects until the labeled fraction reaches a target inside the band.

    Candidates that would push the fraction above the band are rejected;
    the achieved fraction and the defect list are stored in ``meta``.
    """
    spec.validate()
    rng = rng if isinstance(rng, np.random.Generator) else cloud_rng(int(rng), 0)
    if cloud.labels is not None and np.any(cloud.labels):
        raise ValueError("inject_defects expects an all-normal cloud")
    pts = np.array(cloud.points, dtype=np.float64, copy=True)
    if extent is None:
        extent = tuple(pts[:, :2].max(axis=0))
    labels = np.zeros(pts.shape[0], dtype=bool)
    deleted = np.zeros(pts.shape[0], dtype=bool)
    placed = []
    if spec.max_count > 0:
        target = spec.target_fraction or rng.uniform(spec.fraction_low, spec.fraction_high)
        target = float(np.clip(target, spec.fraction_low, spec.fraction_high))
        attempts = 0
        while len(placed) < spec.max_count and attempts < 200:
            attempts += 1
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            d = _sample_defect(kind, spec, extent, rng)
            trial_pts = pts.copy()
            mod, dele = _apply_defect(d, spec, trial_pts, rng)
            new_lab = (labels | mod) & ~(deleted | dele)
            n_alive = int((~(deleted | dele)).sum())
            frac = new_lab.sum() / n_alive
            if frac > spec.fraction_high or not mod.any():
                continue
            pts, labels, deleted = trial_pts, labels | mod, deleted | dele
            placed.append(d)
            if frac >= target:
                break
        alive = ~deleted
        frac = labels[alive].sum() / alive.sum()
        if not spec.fraction_low <= frac <= spec.fraction_high:
            raise ValueError(f"could not reach the defect band [{spec.fraction_low}, {spec.fraction_high}] "
                             f"(got {frac:.5f}); enlarge defects or raise max_count")
    alive = ~deleted
    meta = dict(cloud.meta)
    meta["defects"] = [(d.kind, d.centre, d.radius) for d in placed]
    meta["defect_fraction"] = float(labels[alive].mean())
    return PointCloud(pts[alive], labels=labels[alive].astype(np.uint8), source_id=cloud.source_id, unit=cloud.unit,
                      meta=meta)


@dataclass
class ArtifactSpec:
    occlusion_prob: float = 0.5
    max_stripes: int = 2
    stripe_width: float = 0.25  # mm
    stripe_direction: str = "random"  # x, y or random (axis-aligned either way)
    blur_radius: float = 0.08
    blur_rate: float = 0.3

    def validate(self):
        if not 0 <= self.occlusion_prob <= 1 or not 0 <= self.blur_rate <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.stripe_width < 0 or self.blur_radius < 0:
            raise ValueError("widths must be non-negative")
        if self.stripe_direction not in ("x", "y", "random"):
            raise ValueError("stripe_direction must be x, y or random")


def occlusion_mask(points: np.ndarray, centre: float, width: float, direction: str) -> np.ndarray:
    """Points inside a stripe running along ``direction`` (x stripes cut a y band)."""
    coord = points[:, 1] if direction == "x" else points[:, 0]
    return np.abs(coord - centre) < width / 2


def apply_scan_artifacts(cloud: PointCloud, spec: ArtifactSpec, rng: np.random.Generator | int) -> PointCloud:
    spec.validate()
    rng = rng if isinstance(rng, np.random.Generator) else cloud_rng(int(rng), 1)
    if cloud.labels is None:
        raise ValueError("apply_scan_artifacts needs a labeled cloud")
    pts, labels = cloud.points, cloud.labels.astype(bool)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    remove = np.zeros(pts.shape[0], dtype=bool)
    n_stripes = 0
    if spec.stripe_width > 0 and spec.max_stripes > 0 and rng.uniform() < spec.occlusion_prob:
        n_stripes = int(rng.integers(1, spec.max_stripes + 1))
        for _ in range(n_stripes):
            direction = spec.stripe_direction
            if direction == "random":
                direction = "xy"[int(rng.integers(2))]
            ax = 1 if direction == "x" else 0
            centre = rng.uniform(lo[ax] + spec.stripe_width, hi[ax] - spec.stripe_width)
            remove |= occlusion_mask(pts, centre, spec.stripe_width, direction)
    if remove.all():
        raise ValueError("occlusion would remove every point")
    flips = np.zeros(pts.shape[0], dtype=bool)
    if spec.blur_rate > 0 and spec.blur_radius > 0 and labels.any():
        from scipy.spatial import cKDTree

        tree = cKDTree(pts[labels, :2])
        near = np.isfinite(tree.query(pts[:, :2], k=1, distance_upper_bound=spec.blur_radius)[0])
        cand = np.flatnonzero(near & ~labels)
        flips[cand[rng.uniform(size=cand.size) < spec.blur_rate]] = True
    keep = ~remove
    new_labels = (labels | flips)[keep].astype(np.uint8)
    meta = dict(cloud.meta)
    meta["occlusion_stripes"] = n_stripes
    meta["occluded_points"] = int(remove.sum())
    meta["aggregation_flips"] = np.flatnonzero(flips[keep])
    meta["defect_fraction"] = float(new_labels.mean())
    return PointCloud(pts[keep], labels=new_labels, normals=None if cloud.normals is None else cloud.normals[keep],
                      source_id=cloud.source_id, unit=cloud.unit, meta=meta)


def add_normal_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator | int, normals=None) -> PointCloud:
    """Displace each point by i.i.d. N(0, sigma^2) along its surface normal."""
    rng = rng if isinstance(rng, np.random.Generator) else cloud_rng(int(rng), 2)
    if normals is None:
        from cinet.geometry import estimate_normals

        normals = estimate_normals(cloud).normals
    pts = cloud.points + rng.normal(0.0, sigma, size=(cloud.n_points, 1)) * normals
    return cloud.with_points(pts)


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    n_clouds: int = 10
    seed: int = 0
    split_train: float = 0.70
    split_val: float = 0.15
    split_test: float = 0.15
    n_train: int = -1  # explicit counts override the fractions when all three are >= 0
    n_val: int = -1
    n_test: int = -1


@dataclass
class GeneratorConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    substrate: SubstrateSpec = field(default_factory=SubstrateSpec)
    defects: DefectSpec = field(default_factory=DefectSpec)
    artifacts: ArtifactSpec = field(default_factory=ArtifactSpec)

    def to_ini(self) -> str:
        return format_ini({"dataset": self.dataset, "substrate": self.substrate, "defects": self.defects,
                           "artifacts": self.artifacts})


SPLIT_RULE = ("largest remainder: each split gets floor(n*fraction); leftover clouds go to the splits "
              "with the largest fractional parts, ties to the later split (test, then val, then train)")


def split_counts(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple:
    f = np.asarray(fractions, dtype=np.float64)
    if np.any(f < 0) or f.sum() <= 0:
        raise ValueError("split fractions must be non-negative with a positive sum")
    quota = n * f / f.sum()
    base = np.floor(quota + 1e-9).astype(int)
    rem = quota - base
    order = sorted(range(3), key=lambda i: (-round(rem[i], 9), -i))
    for i in order[: n - base.sum()]:
        base[i] += 1
    return tuple(int(v) for v in base)


def load_generator_config(path=None, text: str | None = None) -> GeneratorConfig:
    cfg = GeneratorConfig()
    if path is None and text is None:
        return cfg
    sections = read_ini(text if text is not None else path, default_section="dataset", is_text=text is not None)
    unknown = set(sections) - {"dataset", "substrate", "defects", "artifacts"}
    if unknown:
        raise ValueError(f"unknown generator config sections: {', '.join(sorted(unknown))}")
    for name in ("dataset", "substrate", "defects", "artifacts"):
        if name in sections:
            setattr(cfg, name, from_mapping(type(getattr(cfg, name)), sections[name], base=getattr(cfg, name)))
    return cfg


def generate_cloud(cfg: GeneratorConfig, index: int) -> PointCloud:
    rng = cloud_rng(cfg.dataset.seed, index)
    cid = f"cloud{index:04d}"
    sub = generate_substrate(cfg.substrate, rng)
    sub = replace_id(sub, cid)
    extent = (cfg.substrate.extent_x, cfg.substrate.extent_y)
    labeled = inject_defects(sub, cfg.defects, rng, extent)
    return apply_scan_artifacts(labeled, cfg.artifacts, rng)


def replace_id(cloud: PointCloud, cid: str) -> PointCloud:
    return replace(cloud, source_id=cid)


def dataset_splits(cfg: GeneratorConfig) -> list:
    d = cfg.dataset
    if min(d.n_train, d.n_val, d.n_test) >= 0:
        counts = (d.n_train, d.n_val, d.n_test)
    else:
        counts = split_counts(d.n_clouds, (d.split_train, d.split_val, d.split_test))
    return ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]


def generate_dataset(config, out_dir, jobs: int = 1) -> list:
    """Write ``train/ val/ test/`` PLY files, manifest.csv and generator.ini.

    Returns the manifest rows. Output is a pure function of the config.
    """
    cfg = config if isinstance(config, GeneratorConfig) else load_generator_config(config)
    splits = dataset_splits(cfg)
    os.makedirs(out_dir, exist_ok=True)
    for s in ("train", "val", "test"):
        os.makedirs(os.path.join(out_dir, s), exist_ok=True)
    if jobs > 1:
        from joblib import Parallel, delayed

        clouds = Parallel(n_jobs=jobs)(delayed(generate_cloud)(cfg, i) for i in range(len(splits)))
    else:
        clouds = [generate_cloud(cfg, i) for i in range(len(splits))]
    rows = []
    for cloud, split in zip(clouds, splits):
        save_point_cloud(cloud, os.path.join(out_dir, split, cloud.source_id + ".ply"))
        rows.append({"id": cloud.source_id, "split": split, "defect_fraction": float(cloud.labels.mean()),
                     "n_points": cloud.n_points, "occluded_points": cloud.meta["occluded_points"],
                     "aggregation_flips": int(len(cloud.meta["aggregation_flips"]))})
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        fh.write(f"# split rule: {SPLIT_RULE}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["id", "split", "defect_fraction"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "defect_fraction": f"{r['defect_fraction']:.17g}"})
    with open(os.path.join(out_dir, "generator.ini"), "w") as fh:
        fh.write(cfg.to_ini())
    return rows


def read_manifest(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def load_split(data_dir, split: str) -> list:
    """Load every ``*.ply`` of one split, sorted by file name."""
    from cinet.io import load_point_cloud

    d = os.path.join(data_dir, split)
    if not os.path.isdir(d):
        raise FileNotFoundError(f"dataset split directory not found: {d}")
    names = sorted(f for f in os.listdir(d) if f.endswith(".ply"))
    return [replace_id(load_point_cloud(os.path.join(d, f)), f[:-4]) for f in names]
