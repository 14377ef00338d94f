"""Occupancy fields over the canonical cube [-0.5, 0.5]^3.

A field maps query points to occupancy in [0, 1] with the surface at the 0.5
level set. Analytic primitives squash an exact signed distance through a steep
logistic: the 0.5 crossing sits exactly on the analytic surface, values
saturate to 0/1 away from it, and the narrow smooth band lets marching cubes
interpolate crossings to sub-cell accuracy. fit_field builds the same contract
from a normalized point cloud, standing in for a learned reconstruction
network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import TooFewPoints

Array = np.ndarray

DEFAULT_STEEPNESS = 200.0  # logistic gain, inverse canonical units


class OccupancyField:
    """Evaluation contract: eval((n, 3) points) -> (n,) occupancy in [0, 1]."""

    def eval(self, points: Array) -> Array:
        raise NotImplementedError

    def __call__(self, points: Array) -> Array:
        return self.eval(points)

    def eval_one(self, point) -> float:
        return float(self.eval(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


class _SdfField(OccupancyField):
    def __init__(self, sdf: Callable[[Array], Array], steepness: float):
        self._sdf = sdf
        self._steepness = float(steepness)

    def eval(self, points: Array) -> Array:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return expit(-self._steepness * self._sdf(pts))


def sphere(radius: float, steepness: float = DEFAULT_STEEPNESS) -> OccupancyField:
    if radius <= 0:
        raise ValueError("radius must be positive")

    def sdf(p: Array) -> Array:
        return np.linalg.norm(p, axis=1) - radius

    return _SdfField(sdf, steepness)


def box(half_extents, steepness: float = DEFAULT_STEEPNESS) -> OccupancyField:
    he = np.asarray(half_extents, dtype=np.float64).reshape(3)
    if np.any(he <= 0):
        raise ValueError("half extents must be positive")

    def sdf(p: Array) -> Array:
        q = np.abs(p) - he
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    return _SdfField(sdf, steepness)


def cylinder(radius: float, half_height: float, steepness: float = DEFAULT_STEEPNESS) -> OccupancyField:
    if radius <= 0 or half_height <= 0:
        raise ValueError("cylinder dimensions must be positive")

    def sdf(p: Array) -> Array:
        dr = np.hypot(p[:, 0], p[:, 1]) - radius
        dz = np.abs(p[:, 2]) - half_height
        d = np.stack([dr, dz], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside

    return _SdfField(sdf, steepness)


def above_plane(z0: float, steepness: float = DEFAULT_STEEPNESS) -> OccupancyField:
    """Occupied above z = z0; intersect with a fitted field to close the
    unobservable support face of a table-resting object exactly at the table."""

    def sdf(p: Array) -> Array:
        return z0 - p[:, 2]

    return _SdfField(sdf, steepness)


class SupportPrism(OccupancyField):
    """Occupied only under observed surface: the vertical prism below the
    sampled points. Tabletop objects rest on the table, so material with no
    surface sample anywhere overhead (e.g. an apron extrapolated into a
    camera-shadow zone around a rim) is not object geometry. Intersecting
    never adds material, so genuine under-overhang free space stays free.
    """

    def __init__(self, points: Array, radius: float | None = None,
                 top_margin: float = 0.02, steepness: float = DEFAULT_STEEPNESS):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._pts_z = pts[:, 2]
        self._tree2d = cKDTree(pts[:, :2])
        if radius is None:
            d, _ = self._tree2d.query(pts[:, :2], k=2)
            radius = 4.0 * max(float(np.median(d[:, 1])), 1e-6)
        self._radius = radius
        self._margin = top_margin
        self._steepness = steepness
        self._k = min(16, len(pts))

    def eval(self, points: Array) -> Array:
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dists, idx = self._tree2d.query(q[:, :2], k=self._k)
        if self._k == 1:
            dists = dists[:, None]
            idx = idx[:, None]
        z_over = np.where(dists <= self._radius, self._pts_z[idx], -np.inf)
        z_top = z_over.max(axis=1)
        inside = expit(self._steepness * (z_top + self._margin - q[:, 2]))
        return np.where(np.isfinite(z_top), inside, 0.0)


def translate(field: OccupancyField, offset) -> OccupancyField:
    offset = np.asarray(offset, dtype=np.float64).reshape(3)

    class _Translated(OccupancyField):
        def eval(self, points: Array) -> Array:
            return field.eval(np.asarray(points, dtype=np.float64).reshape(-1, 3) - offset)

    return _Translated()


def union(a: OccupancyField, b: OccupancyField) -> OccupancyField:
    class _Union(OccupancyField):
        def eval(self, points: Array) -> Array:
            return np.maximum(a.eval(points), b.eval(points))

    return _Union()


def intersection(a: OccupancyField, b: OccupancyField) -> OccupancyField:
    class _Intersection(OccupancyField):
        def eval(self, points: Array) -> Array:
            return np.minimum(a.eval(points), b.eval(points))

    return _Intersection()


def complement(a: OccupancyField) -> OccupancyField:
    class _Complement(OccupancyField):
        def eval(self, points: Array) -> Array:
            return 1.0 - a.eval(points)

    return _Complement()


class CountingField(OccupancyField):
    """Wrapper that counts point evaluations (instrumentation for tests/CLI)."""

    def __init__(self, inner: OccupancyField):
        self.inner = inner
        self.count = 0

    def eval(self, points: Array) -> Array:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.count += len(pts)
        return self.inner.eval(pts)


@dataclass(frozen=True)
class FittedFieldParams:
    neighbor_count: int = 12
    sharpness: float = 200.0  # inverse canonical units

    def __post_init__(self):
        if self.neighbor_count < 3:
            raise ValueError("neighbor_count must be >= 3")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


class FittedField(OccupancyField):
    """Occupancy from signed distance to locally fitted tangent planes.

    Each sample point carries a PCA plane normal oriented toward the viewpoint
    that recorded it (away from the cloud centroid when no viewpoints are
    known). A query blends the plane distances of its nearest samples with
    Gaussian weights, then squashes through a logistic. For a closed sampled
    surface the nearest sample's plane passes through the query's normal ray,
    so far queries saturate to 0 outside and 1 inside.

    Samples sitting far off their own neighborhood plane (residual sensor
    fliers) are excluded before fitting: a flier's plane would otherwise own
    the whole far-field region it is nearest to.
    """

    _BLEND_K = 16
    _CONSISTENCY_RATIO = 0.5  # max plane offset as a fraction of neighborhood radius
    _DENSITY_RATIO = 2.0      # max neighborhood radius as a multiple of the median

    def __init__(self, points: Array, params: FittedFieldParams, view_origins: Array | None = None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < params.neighbor_count:
            raise TooFewPoints(f"{len(pts)} points < neighbor_count {params.neighbor_count}")
        self.params = params

        keep = self._consistent_mask(pts, params.neighbor_count)
        if keep.sum() >= params.neighbor_count:
            pts = pts[keep]
            if view_origins is not None:
                view_origins = np.asarray(view_origins, dtype=np.float64).reshape(-1, 3)[keep]
        self._points = pts
        self._tree = cKDTree(pts)

        k = min(params.neighbor_count + 1, len(pts))
        dists, idx = self._tree.query(pts, k=k)
        neigh = pts[idx]                             # (n, k, 3)
        centroids = neigh.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", neigh - centroids, neigh - centroids)
        _, vecs = np.linalg.eigh(cov)
        normals = vecs[:, :, 0]                      # smallest-eigenvalue direction

        if view_origins is not None:
            toward = view_origins - pts
        else:
            toward = pts - pts.mean(axis=0)
        toward = toward / np.maximum(np.linalg.norm(toward, axis=1, keepdims=True), 1e-12)
        align = np.einsum("ni,ni->n", normals, toward)
        normals[align < 0] *= -1.0
        # Samples viewed nearly edge-on (silhouette bands) get an unreliable
        # flip; take their sign from confidently oriented neighbors instead.
        strength = np.abs(align)
        voters = strength >= 0.3
        for _ in range(2):
            weak = np.nonzero(~voters)[0]
            if len(weak) == 0:
                break
            nb = idx[weak]
            vote = np.einsum("wi,wki->wk", normals[weak], normals[nb])
            vote = (vote * voters[nb]).sum(axis=1)
            normals[weak[vote < 0]] *= -1.0
            voters[weak[np.abs(vote) > 0]] = True
        self._normals = normals
        # One global blending bandwidth (median fit-neighborhood radius). A
        # per-sample bandwidth would let sparse far samples outweigh the
        # true nearest sample far from the surface and flip the sign there.
        self._bandwidth = max(float(np.median(dists[:, -1])), 1e-9)

    @classmethod
    def _consistent_mask(cls, pts: Array, neighbor_count: int) -> Array:
        """Keep samples that are locally planar and not density outliers.

        Sensor fliers fail one of the two: isolated points sit far off their
        neighborhood plane, and edge-mixing curtains (coherent sheets of
        fliers) are an order of magnitude sparser than the true surface.
        """
        k = min(neighbor_count + 1, len(pts))
        dists, idx = cKDTree(pts).query(pts, k=k)
        neigh = pts[idx]
        centroids = neigh.mean(axis=1)
        cov = np.einsum("nki,nkj->nij", neigh - centroids[:, None, :], neigh - centroids[:, None, :])
        _, vecs = np.linalg.eigh(cov)
        offsets = np.abs(np.einsum("ni,ni->n", pts - centroids, vecs[:, :, 0]))
        radius = np.maximum(dists[:, -1], 1e-12)
        planar = offsets <= cls._CONSISTENCY_RATIO * radius
        dense = radius <= cls._DENSITY_RATIO * np.median(radius)
        return planar & dense

    def eval(self, points: Array) -> Array:
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        k = min(self._BLEND_K, len(self._points))
        dists, idx = self._tree.query(q, k=k)
        if k == 1:
            dists = dists[:, None]
            idx = idx[:, None]
        p = self._points[idx]                        # (m, k, 3)
        n = self._normals[idx]
        plane_dist = np.einsum("mki,mki->mk", q[:, None, :] - p, n)
        # Shepard distance weights keep the blend local; the soft-max factor
        # biases toward the largest nearby plane distance, which is the
        # locally correct signed distance (support property of tangent
        # planes). Tangential evidence (a dense support disc seen edge-on)
        # then cannot mark the half-space above it as interior, and a single
        # misoriented sample cannot carve interior out of free space: calling
        # a region inside requires all nearby votes to agree.
        eps2 = (0.25 * self._bandwidth) ** 2
        shepard = 1.0 / (dists ** 2 + eps2) ** 2
        support = np.exp(4.0 * (plane_dist - plane_dist.max(axis=1, keepdims=True))
                         / self._bandwidth)
        w = shepard * support
        s = (w * plane_dist).sum(axis=1) / w.sum(axis=1)
        return expit(-self.params.sharpness * s)


def fit_field(normalized_points: Array, params: FittedFieldParams | None = None,
              view_origins: Array | None = None) -> FittedField:
    """Fit an occupancy field to a cloud already normalized to [-0.5, 0.5]^3."""
    return FittedField(normalized_points, params or FittedFieldParams(), view_origins)
