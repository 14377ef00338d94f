"""Object point clouds: fusion, statistical outlier removal, normalization.

The normalization pair (center, scale) maps a cloud into the canonical cube
[-0.5, 0.5]^3; its inverse is a rigid similarity that places a canonical-frame
reconstruction back into the world without any explicit pose estimation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud

Array = np.ndarray

EPS_SCALE = 1e-6          # below this extent a cloud cannot anchor a scale
EXACT_KNN_LIMIT = 20_000  # brute-force k-NN up to here, kd-tree beyond

DEFAULT_OUTLIER_K = 20
DEFAULT_OUTLIER_STD = 2.0


@dataclass(frozen=True)
class ObjectCloud:
    """World-frame points of one object instance.

    view_origins optionally records, per point, the camera center that
    observed it (used to orient fitted surface normals toward the viewpoint).
    """

    points: Array
    instance_id: int
    view_origins: Array | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("cloud coordinates must be finite")
        if self.instance_id <= 0:
            raise ValueError("instance_id must be positive")
        object.__setattr__(self, "points", pts)
        if self.view_origins is not None:
            vo = np.asarray(self.view_origins, dtype=np.float64).reshape(-1, 3)
            if vo.shape != pts.shape:
                raise ValueError("view_origins must match points")
            object.__setattr__(self, "view_origins", vo)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, index: Array) -> "ObjectCloud":
        vo = self.view_origins[index] if self.view_origins is not None else None
        return ObjectCloud(self.points[index], self.instance_id, vo)


@dataclass(frozen=True)
class NormalizationTransform:
    center: Array
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def matrix_world_from_canonical(self) -> Array:
        """4x4 similarity: scale * I block plus center column."""
        m = np.eye(4)
        m[:3, :3] *= self.scale
        m[:3, 3] = self.center
        return m

    def matrix_canonical_from_world(self) -> Array:
        m = np.eye(4)
        m[:3, :3] /= self.scale
        m[:3, 3] = -self.center / self.scale
        return m


def fuse(clouds: list[ObjectCloud]) -> ObjectCloud:
    """Concatenate per-view clouds of one instance, preserving input order."""
    if not clouds:
        raise ValueError("fuse needs at least one cloud")
    iid = clouds[0].instance_id
    if any(c.instance_id != iid for c in clouds):
        raise ValueError("fuse requires matching instance ids")
    pts = np.concatenate([c.points for c in clouds], axis=0)
    if all(c.view_origins is not None for c in clouds):
        vo = np.concatenate([c.view_origins for c in clouds], axis=0)
    else:
        vo = None
    return ObjectCloud(pts, iid, vo)


def _knn_mean_dists_brute(points: Array, k: int) -> Array:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, kth=k - 1, axis=1)[:, :k]
    return np.sqrt(part).mean(axis=1)


def _knn_mean_dists_tree(points: Array, k: int) -> Array:
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=k + 1)
    return dists[:, 1:].mean(axis=1)


def knn_mean_distances(points: Array, k: int) -> Array:
    """Mean distance of each point to its k nearest neighbors (self excluded)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= EXACT_KNN_LIMIT:
        return _knn_mean_dists_brute(points, k)
    return _knn_mean_dists_tree(points, k)


def remove_statistical_outliers(cloud: ObjectCloud, k: int = DEFAULT_OUTLIER_K,
                                std_ratio: float = DEFAULT_OUTLIER_STD) -> tuple[ObjectCloud, Array]:
    """Drop points whose mean k-NN distance exceeds mu + std_ratio * sigma.

    The inequality is strict, so zero-variance clouds (regular grids) keep
    every point. Clouds with <= k points pass through unchanged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if std_ratio <= 0:
        raise ValueError("std_ratio must be positive")
    if len(cloud) <= k:
        return cloud, np.empty(0, dtype=np.int64)
    means = knn_mean_distances(cloud.points, k)
    mu = means.mean()
    sigma = means.std()
    removed = np.nonzero(means > mu + std_ratio * sigma)[0]
    keep = np.setdiff1d(np.arange(len(cloud)), removed, assume_unique=True)
    return cloud.select(keep), removed


def largest_clusters(cloud: ObjectCloud, radius_factor: float = 2.5,
                     keep_fraction: float = 0.1) -> ObjectCloud:
    """Keep clusters of at least keep_fraction of the largest cluster's size.

    Clusters are single-linkage components at radius_factor times the median
    nearest-neighbor spacing. Small detached islands are segmentation ghosts
    (boundary pixels that kept this instance's id but read a neighboring
    surface's depth), not object geometry.
    """
    n = len(cloud)
    if n < 4:
        return cloud
    pts = cloud.points
    tree = cKDTree(pts)
    d_nn, _ = tree.query(pts, k=2)
    radius = radius_factor * float(np.median(d_nn[:, 1]))
    if radius <= 0:
        return cloud

    parent = np.arange(n)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in tree.query_pairs(radius):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
    roots = np.array([find(i) for i in range(n)])
    labels, counts = np.unique(roots, return_counts=True)
    cutoff = keep_fraction * counts.max()
    keep_roots = set(labels[counts >= cutoff].tolist())
    keep = np.array([r in keep_roots for r in roots])
    if keep.all():
        return cloud
    return cloud.select(np.nonzero(keep)[0])


def compute_normalization(cloud: ObjectCloud | Array) -> NormalizationTransform:
    """Center = midpoint of the axis-aligned bounds, scale = largest extent."""
    pts = cloud.points if isinstance(cloud, ObjectCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateCloud("empty cloud")
    bound_max = pts.max(axis=0)
    bound_min = pts.min(axis=0)
    center = (bound_max + bound_min) / 2
    scale = float(np.max(bound_max - bound_min))
    if scale <= EPS_SCALE:
        raise DegenerateCloud(f"extent {scale:.3e} m below {EPS_SCALE:.0e} m")
    return NormalizationTransform(center, scale)


def normalize(points: Array, t: NormalizationTransform) -> Array:
    return (np.asarray(points, dtype=np.float64) - t.center) / t.scale


def denormalize(points: Array, t: NormalizationTransform) -> Array:
    return np.asarray(points, dtype=np.float64) * t.scale + t.center
