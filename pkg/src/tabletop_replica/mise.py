"""Multiresolution isosurface extraction.

Marching cubes runs on a dense occupancy lattice using a 256-case table that
is generated at import time by tracing isosurface segments across cell faces.
Ambiguous (diagonal) faces always separate the occupied corners, so adjacent
cells agree on shared-face segments and closed level sets mesh watertight.
Triangle winding follows the traced loop direction, giving outward normals
(toward occupancy below threshold).

extract_mesh accelerates this by evaluating the field coarse-to-fine: only
cells whose corners straddle the threshold (plus a one-cell halo) are refined
to the final resolution; everything else is filled with a side-correct
constant. The filled lattice is then handed to the same marching cubes code,
so extraction is an acceleration of the dense run, not an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyField
from .field import OccupancyField

Array = np.ndarray

WELD_TOLERANCE = 1e-9
DEGENERATE_AREA = 1e-12

# Corner c = (c & 1, (c >> 1) & 1, (c >> 2) & 1).
_CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.float64)

# Edge order: 4 x-edges, 4 y-edges, 4 z-edges.
_EDGES = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
]
_EDGE_AXIS = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2], dtype=np.int64)
# Lattice offset of each edge's base point relative to the cell origin.
_EDGE_OFFSET = np.array([_CORNERS[a] for a, _ in _EDGES], dtype=np.int64)

_FACES = [  # (outward normal, corners on the face)
    ((-1, 0, 0), [0, 2, 4, 6]),
    ((+1, 0, 0), [1, 3, 5, 7]),
    ((0, -1, 0), [0, 1, 4, 5]),
    ((0, +1, 0), [2, 3, 6, 7]),
    ((0, 0, -1), [0, 1, 2, 3]),
    ((0, 0, +1), [4, 5, 6, 7]),
]


def _face_cycles() -> list[tuple[Array, list[int]]]:
    """Corner cycles ordered counterclockwise as seen from outside the cell."""
    cycles = []
    for normal, corners in _FACES:
        n = np.array(normal, dtype=np.float64)
        pts = _CORNERS[corners]
        center = pts.mean(axis=0)
        ref = pts[0] - center
        ref /= np.linalg.norm(ref)
        perp = np.cross(n, ref)
        ang = np.arctan2((pts - center) @ perp, (pts - center) @ ref)
        order = np.argsort(ang)
        cycles.append((n, [corners[i] for i in order]))
    return cycles


def _edge_id(a: int, b: int) -> int:
    key = (min(a, b), max(a, b))
    return _EDGES.index(key)


def _face_segments(normal: Array, cycle: list[int], occ: tuple[int, ...]) -> list[tuple[int, int]]:
    """Directed isosurface segments on one face, as (edge_from, edge_to).

    Walking a segment with the outward face normal up, the occupied region is
    on the right. Diagonal patterns are split so each occupied corner is cut
    off by its own segment.
    """
    bits = [occ[c] for c in cycle]
    crossings = [i for i in range(4) if bits[i] != bits[(i + 1) % 4]]
    if not crossings:
        return []

    mids = {i: (_CORNERS[cycle[i]] + _CORNERS[cycle[(i + 1) % 4]]) / 2 for i in crossings}

    def directed(i: int, j: int, occupied_pos: Array) -> tuple[int, int]:
        d = mids[j] - mids[i]
        left = np.cross(normal, d)
        on_left = (occupied_pos - (mids[i] + mids[j]) / 2) @ left > 0
        pair = (j, i) if on_left else (i, j)
        return (_edge_id(cycle[pair[0]], cycle[(pair[0] + 1) % 4]),
                _edge_id(cycle[pair[1]], cycle[(pair[1] + 1) % 4]))

    if len(crossings) == 2:
        i, j = crossings
        occupied_pos = _CORNERS[[cycle[p] for p in range(4) if bits[p]]].mean(axis=0)
        return [directed(i, j, occupied_pos)]

    # Four crossings: bits alternate around the cycle.
    segs = []
    for p in range(4):
        if bits[p]:  # segment cutting off occupied corner at cycle position p
            segs.append(directed((p - 1) % 4, p, _CORNERS[cycle[p]]))
    return segs


def _build_tri_table() -> list[Array]:
    cycles = _face_cycles()
    table: list[Array] = []
    for case in range(256):
        occ = tuple((case >> c) & 1 for c in range(8))
        succ: dict[int, int] = {}
        for normal, cycle in cycles:
            for a, b in _face_segments(normal, cycle, occ):
                if a in succ:
                    raise AssertionError(f"case {case}: edge {a} has two outgoing segments")
                succ[a] = b
        ins = list(succ.values())
        if sorted(ins) != sorted(succ.keys()):
            raise AssertionError(f"case {case}: segment graph is not a union of cycles")
        tris: list[tuple[int, int, int]] = []
        remaining = dict(succ)
        while remaining:
            start = min(remaining)
            loop = [start]
            nxt = remaining.pop(start)
            while nxt != start:
                loop.append(nxt)
                nxt = remaining.pop(nxt)
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i], loop[i + 1]))
        table.append(np.array(tris, dtype=np.int64).reshape(-1, 3))

    # Sanity: a lone occupied corner 0 yields one triangle whose winding points
    # away from that corner (toward the unoccupied side).
    tri = table[1]
    assert tri.shape == (1, 3)
    mids = np.array([(_CORNERS[a] + _CORNERS[b]) / 2 for a, b in _EDGES])
    p = mids[tri[0]]
    normal = np.cross(p[1] - p[0], p[2] - p[0])
    assert normal @ np.ones(3) > 0
    return table


TRI_TABLE = _build_tri_table()


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle set; frame_tag records canonical vs world frame."""

    vertices: Array
    triangles: Array
    frame_tag: str = "canonical"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if self.frame_tag not in ("canonical", "world"):
            raise ValueError("frame_tag must be 'canonical' or 'world'")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, matrix: Array, frame_tag: str) -> "TriangleMesh":
        m = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        return TriangleMesh(v, self.triangles, frame_tag)


def triangle_normals(mesh: TriangleMesh, normalized: bool = True) -> Array:
    tri = mesh.vertices[mesh.triangles]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalized:
        length = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(length, 1e-300)
    return n


def triangle_areas(mesh: TriangleMesh) -> Array:
    return 0.5 * np.linalg.norm(triangle_normals(mesh, normalized=False), axis=1)


def surface_area(mesh: TriangleMesh) -> float:
    return float(triangle_areas(mesh).sum())


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed volume by the divergence theorem; meaningful for closed meshes."""
    tri = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def edge_counts(mesh: TriangleMesh) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    if mesh.is_empty:
        return False
    return all(c == 2 for c in edge_counts(mesh).values())


def connected_components(mesh: TriangleMesh) -> list[Array]:
    """Triangle index groups connected through shared vertices (union-find)."""
    parent = np.arange(len(mesh.vertices))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for tri in mesh.triangles:
        r = find(tri[0])
        for v in tri[1:]:
            rv = find(v)
            if rv != r:
                parent[rv] = r
    roots = np.array([find(t) for t in mesh.triangles[:, 0]])
    return [np.nonzero(roots == r)[0] for r in np.unique(roots)]


def weld_mesh(mesh: TriangleMesh, tolerance: float = WELD_TOLERANCE) -> TriangleMesh:
    """Merge near-coincident vertices and drop degenerate triangles."""
    if mesh.is_empty:
        return mesh
    keys = np.round(mesh.vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    verts = mesh.vertices[first]
    tris = inverse[mesh.triangles]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]
    tri = verts[tris]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    tris = tris[area >= DEGENERATE_AREA]
    used = np.unique(tris)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[tris], mesh.frame_tag)


def marching_cubes(values: Array, threshold: float = 0.5,
                   origin=(0.0, 0.0, 0.0), spacing: float | Array = 1.0,
                   frame_tag: str = "canonical") -> TriangleMesh:
    """Triangulate the threshold level set of a sampled occupancy lattice.

    values[i, j, k] is the sample at origin + (i, j, k) * spacing. Vertices
    sit on lattice edges at the linear-interpolation crossing. Returns an
    empty mesh when no edge crosses the threshold.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("lattice must be 3-d with at least 2 samples per axis")
    if not np.isfinite(values).all():
        raise ValueError("lattice values must be finite")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).astype(np.float64)

    occ = values > threshold
    n0, n1, n2 = values.shape

    verts_parts: list[Array] = []
    edge_index: list[Array] = []
    offset = 0
    for axis in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        v0 = values[tuple(sl_lo)]
        v1 = values[tuple(sl_hi)]
        cross = occ[tuple(sl_lo)] != occ[tuple(sl_hi)]
        qi, qj, qk = np.nonzero(cross)
        a = v0[qi, qj, qk]
        b = v1[qi, qj, qk]
        t = (threshold - a) / (b - a)
        base = np.stack([qi, qj, qk], axis=1).astype(np.float64)
        pos = base.copy()
        pos[:, axis] += t
        verts_parts.append(origin + pos * spacing)

        idx = np.full(cross.shape, -1, dtype=np.int64)
        idx[qi, qj, qk] = offset + np.arange(len(qi))
        offset += len(qi)
        edge_index.append(idx)

    vertices = np.concatenate(verts_parts, axis=0) if offset else np.empty((0, 3))

    case = np.zeros((n0 - 1, n1 - 1, n2 - 1), dtype=np.uint16)
    for c in range(8):
        dx, dy, dz = int(_CORNERS[c, 0]), int(_CORNERS[c, 1]), int(_CORNERS[c, 2])
        case |= occ[dx:dx + n0 - 1, dy:dy + n1 - 1, dz:dz + n2 - 1].astype(np.uint16) << c

    surface = (case != 0) & (case != 255)
    tri_parts: list[Array] = []
    if surface.any():
        ci, cj, ck = np.nonzero(surface)
        cell_cases = case[ci, cj, ck]
        cells = np.stack([ci, cj, ck], axis=1)
        for c in np.unique(cell_cases):
            entry = TRI_TABLE[int(c)]
            if len(entry) == 0:
                continue
            sel = cells[cell_cases == c]               # (M, 3)
            te = entry.ravel()                         # (T*3,)
            ax = _EDGE_AXIS[te]
            pts = sel[:, None, :] + _EDGE_OFFSET[te][None, :, :]
            vid = np.empty((len(sel), len(te)), dtype=np.int64)
            for axis in range(3):
                m = ax == axis
                if not m.any():
                    continue
                grid = edge_index[axis]
                p = pts[:, m, :]
                vid[:, m] = grid[p[..., 0], p[..., 1], p[..., 2]]
            tri_parts.append(vid.reshape(-1, 3))

    if not tri_parts:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64), frame_tag)
    triangles = np.concatenate(tri_parts, axis=0)
    return weld_mesh(TriangleMesh(vertices, triangles, frame_tag))


@dataclass(frozen=True)
class MiseConfig:
    initial_resolution: int = 32
    final_resolution: int = 128
    threshold: float = 0.5
    padding: float = 0.1

    def __post_init__(self):
        for r in (self.initial_resolution, self.final_resolution):
            if r < 2 or (r & (r - 1)) != 0:
                raise ValueError("resolutions must be powers of two >= 2")
        if self.final_resolution < self.initial_resolution:
            raise ValueError("final_resolution must be >= initial_resolution")
        ratio = self.final_resolution // self.initial_resolution
        if ratio * self.initial_resolution != self.final_resolution or (ratio & (ratio - 1)) != 0:
            raise ValueError("final/initial resolution ratio must be a power of two")
        if not (0 < self.threshold < 1):
            raise ValueError("threshold must be in (0, 1)")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def cube_min(self) -> float:
        return -(0.5 + self.padding)

    @property
    def cube_span(self) -> float:
        return 1.0 + 2 * self.padding


_HALO = np.ones((3, 3, 3), dtype=bool)


def _dilate(mask: Array) -> Array:
    """One-cell halo over the full 26-neighborhood."""
    return ndimage.binary_dilation(mask, structure=_HALO)


def extract_mesh(field: OccupancyField, cfg: MiseConfig | None = None) -> TriangleMesh:
    """Coarse-to-fine evaluation of `field`, then marching cubes.

    Identical output to marching cubes on the dense final-resolution lattice:
    only cells straddling the threshold (plus a one-cell halo) are refined,
    and finalized uniform cells are filled with a side-correct constant, so
    the filled lattice has the same occupancy sides and the same values on
    every crossing edge as the dense evaluation.
    """
    cfg = cfg or MiseConfig()
    final = cfg.final_resolution
    lo = cfg.cube_min
    h_final = cfg.cube_span / final

    values = np.full((final + 1,) * 3, np.nan)

    def ensure_values(lattice_pts: Array) -> None:
        flat = np.unique(
            (lattice_pts[:, 0] * (final + 1) + lattice_pts[:, 1]) * (final + 1) + lattice_pts[:, 2]
        )
        idx = np.unravel_index(flat, values.shape)
        missing = np.isnan(values[idx])
        if not missing.any():
            return
        miss_idx = tuple(a[missing] for a in idx)
        pts = lo + np.stack(miss_idx, axis=1).astype(np.float64) * h_final
        values[miss_idx] = field.eval(pts)

    res = cfg.initial_resolution
    cells = np.stack(np.meshgrid(*([np.arange(res)] * 3), indexing="ij"), axis=-1).reshape(-1, 3)
    fills: list[tuple[Array, int, float]] = []  # (uniform cell coords, step, fill value)

    while True:
        step = final // res
        corners = (cells[:, None, :] + _CORNERS[None, :, :].astype(np.int64)) * step  # (n, 8, 3)
        ensure_values(corners.reshape(-1, 3))
        cvals = values[corners[..., 0], corners[..., 1], corners[..., 2]]
        occ = cvals > cfg.threshold
        straddle = occ.any(axis=1) & ~occ.all(axis=1)

        if res == final:
            if not straddle.any():
                raise EmptyField("no threshold crossing at final resolution")
            break

        mask = np.zeros((res,) * 3, dtype=bool)
        sc = cells[straddle]
        mask[sc[:, 0], sc[:, 1], sc[:, 2]] = True
        refine = _dilate(mask)

        keep = refine[cells[:, 0], cells[:, 1], cells[:, 2]]
        uniform_final = cells[~keep]
        if len(uniform_final):
            # Representative corner value per finalized cell; side-correct by
            # the uniformity just established.
            rep = values[uniform_final[:, 0] * step, uniform_final[:, 1] * step, uniform_final[:, 2] * step]
            fills.append((uniform_final, step, rep))

        parents = cells[keep]
        children = parents[:, None, :] * 2 + _CORNERS[None, :, :].astype(np.int64)
        cells = children.reshape(-1, 3)
        res *= 2
        if len(cells) == 0:
            raise EmptyField("no active cells to refine")

    # Fill unevaluated lattice points inside finalized uniform blocks.
    for block_cells, step, rep in fills:
        rep = np.broadcast_to(rep, (len(block_cells),))
        offsets = np.stack(np.meshgrid(*([np.arange(step + 1)] * 3), indexing="ij"), axis=-1).reshape(-1, 3)
        pts = block_cells[:, None, :] * step + offsets[None, :, :]
        flat_i = pts[..., 0]
        flat_j = pts[..., 1]
        flat_k = pts[..., 2]
        cur = values[flat_i, flat_j, flat_k]
        fill = np.where(np.isnan(cur), np.broadcast_to(rep[:, None], cur.shape), cur)
        values[flat_i, flat_j, flat_k] = fill

    assert not np.isnan(values).any()
    return marching_cubes(values, cfg.threshold, origin=(lo, lo, lo), spacing=h_final,
                          frame_tag="canonical")


def dense_lattice(field: OccupancyField, cfg: MiseConfig | None = None) -> Array:
    """Full final-resolution evaluation (reference path for extract_mesh)."""
    cfg = cfg or MiseConfig()
    n = cfg.final_resolution + 1
    axis = cfg.cube_min + np.arange(n) * (cfg.cube_span / cfg.final_resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    return field.eval(grid).reshape(n, n, n)
