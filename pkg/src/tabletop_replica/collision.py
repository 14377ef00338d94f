"""Convex collision queries: exact separating-axis tests on vertex sets.

A ConvexPiece caches its hull face normals and unique edge directions, so a
pairwise test only projects both vertex sets onto the candidate axes (face
normals of either piece plus edge-direction cross products), which is exact
for convex polytopes. Bounding spheres give a cheap reject before any
projection work.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, QhullError

Array = np.ndarray

_AXIS_TOL = 1e-12


def _unit_rows(dirs: Array) -> Array:
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = np.linalg.norm(d, axis=1)
    keep = n > _AXIS_TOL
    return d[keep] / n[keep, None]


def _dedupe_directions(dirs: Array) -> Array:
    """Unit directions with sign and near-duplicates removed."""
    norms = np.linalg.norm(dirs, axis=1)
    dirs = dirs[norms > _AXIS_TOL] / norms[norms > _AXIS_TOL, None]
    # Canonical sign: first significant component positive.
    sign = np.where(np.abs(dirs[:, 0]) > 1e-9, np.sign(dirs[:, 0]),
                    np.where(np.abs(dirs[:, 1]) > 1e-9, np.sign(dirs[:, 1]), np.sign(dirs[:, 2])))
    dirs = dirs * sign[:, None]
    keys = np.round(dirs / 1e-9).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return dirs[np.sort(first)]


class ConvexPiece:
    """Convex polytope given by its vertex set (need not be minimal).

    face_normals/edge_dirs may be supplied when known analytically (boxes,
    axis sweeps); otherwise they are derived from the hull on first use.
    Supplying a superset of the true face normals keeps SAT exact.
    """

    def __init__(self, vertices: Array, face_normals: Array | None = None,
                 edge_dirs: Array | None = None):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if len(v) < 1:
            raise ValueError("convex piece needs at least one vertex")
        self.vertices = v
        self.center = v.mean(axis=0)
        self.radius = float(np.linalg.norm(v - self.center, axis=1).max())
        # Supplied axes are trusted (analytic boxes/sweeps); only drop zero
        # rows and normalize, no dedupe sorting on the hot path.
        self._face_normals = _unit_rows(face_normals) if face_normals is not None else None
        self._edge_dirs = _unit_rows(edge_dirs) if edge_dirs is not None else None

    def _build(self) -> None:
        if self._face_normals is not None and self._edge_dirs is not None:
            return
        try:
            hull = ConvexHull(self.vertices)
            normals = hull.equations[:, :3]
            simplices = hull.simplices
            edges = np.concatenate([
                self.vertices[simplices[:, 1]] - self.vertices[simplices[:, 0]],
                self.vertices[simplices[:, 2]] - self.vertices[simplices[:, 1]],
                self.vertices[simplices[:, 0]] - self.vertices[simplices[:, 2]],
            ])
        except QhullError:
            # Degenerate (flat/collinear) piece: fall back to pairwise spans.
            d = self.vertices[:, None, :] - self.vertices[None, :, :]
            edges = d.reshape(-1, 3)
            normals = edges
        self._face_normals = _dedupe_directions(normals)
        self._edge_dirs = _dedupe_directions(edges)

    @property
    def face_normals(self) -> Array:
        self._build()
        return self._face_normals

    @property
    def edge_dirs(self) -> Array:
        self._build()
        return self._edge_dirs

    def transformed(self, rotation: Array, translation: Array) -> "ConvexPiece":
        return ConvexPiece(self.vertices @ np.asarray(rotation).T + np.asarray(translation))

    def swept(self, offset: Array) -> "ConvexPiece":
        """Convex sweep along a straight segment: hull of start and end copies.

        Face normals of the sweep are a subset of the originals plus the side
        faces (edge x sweep direction), so they are carried analytically when
        the originals are known.
        """
        off = np.asarray(offset, dtype=np.float64)
        verts = np.concatenate([self.vertices, self.vertices + off])
        if self._face_normals is not None and self._edge_dirs is not None:
            sides = np.cross(self._edge_dirs, off)
            normals = np.concatenate([self._face_normals, sides])
            edges = np.concatenate([self._edge_dirs, off[None, :]])
            return ConvexPiece(verts, normals, edges)
        return ConvexPiece(verts)

    def min_z(self) -> float:
        return float(self.vertices[:, 2].min())


def pieces_intersect(a: ConvexPiece, b: ConvexPiece) -> bool:
    """Exact SAT intersection test (bounding-sphere prefiltered).

    Cross-product axes are used unnormalized: the separation predicate is
    invariant to positive axis scaling, and skipping normalize+dedupe keeps
    the hot path cheap.
    """
    gap = np.linalg.norm(a.center - b.center) - a.radius - b.radius
    if gap > 0:
        return False
    crosses = np.cross(a.edge_dirs[:, None, :], b.edge_dirs[None, :, :]).reshape(-1, 3)
    crosses = crosses[np.einsum("ij,ij->i", crosses, crosses) > _AXIS_TOL]
    axes = np.concatenate([a.face_normals, b.face_normals, crosses])
    pa = a.vertices @ axes.T
    pb = b.vertices @ axes.T
    sep = (pa.max(axis=0) < pb.min(axis=0)) | (pb.max(axis=0) < pa.min(axis=0))
    return not bool(sep.any())


def separation_distance(a: ConvexPiece, b: ConvexPiece) -> float:
    """Largest axis-wise gap found by SAT; positive means disjoint, 0 touching/overlap."""
    axes = np.concatenate([
        a.face_normals,
        b.face_normals,
        _dedupe_directions(np.cross(a.edge_dirs[:, None, :], b.edge_dirs[None, :, :]).reshape(-1, 3)),
    ])
    pa = a.vertices @ axes.T
    pb = b.vertices @ axes.T
    gaps = np.maximum(pb.min(axis=0) - pa.max(axis=0), pa.min(axis=0) - pb.max(axis=0))
    return float(max(gaps.max(), 0.0))


def box_piece(center: Array, axes: Array, half_extents: Array) -> ConvexPiece:
    """Oriented box from center, 3x3 column-axis matrix, and half extents."""
    he = np.asarray(half_extents, dtype=np.float64)
    axes = np.asarray(axes, dtype=np.float64)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    corners = (signs * he) @ axes.T + np.asarray(center, dtype=np.float64)
    return ConvexPiece(corners, face_normals=axes.T.copy(), edge_dirs=axes.T.copy())


def decimate_hull(vertices: Array, max_vertices: int = 64, inflate: float = 0.0) -> Array:
    """Reduce a hull vertex set by deterministic farthest-point sampling.

    The result is a subset (an inner approximation); `inflate` pushes the kept
    vertices out from the centroid to compensate when a conservative outer
    bound is wanted.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    try:
        hull_idx = ConvexHull(v).vertices
        v = v[hull_idx]
    except QhullError:
        pass
    if len(v) > max_vertices:
        order = np.lexsort((v[:, 2], v[:, 1], v[:, 0]))
        chosen = [order[0]]
        d = np.linalg.norm(v - v[chosen[0]], axis=1)
        for _ in range(max_vertices - 1):
            nxt = int(np.argmax(d))
            chosen.append(nxt)
            d = np.minimum(d, np.linalg.norm(v - v[nxt], axis=1))
        v = v[np.array(chosen)]
    if inflate > 0.0:
        center = v.mean(axis=0)
        offs = v - center
        norms = np.linalg.norm(offs, axis=1, keepdims=True)
        v = v + offs / np.maximum(norms, 1e-12) * inflate
    return v
