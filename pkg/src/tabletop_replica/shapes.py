"""Parametric ground-truth shapes for synthetic tabletop scenes.

Every shape is defined in its own frame: upright (+z), resting plane at z = 0,
base centered on the origin. Meshes come from revolving a radial profile
around z (plus explicit boxes and a swept-tube mug handle), so triangle counts
stay small enough for exact ray-cast rendering. Each shape also exposes convex
vertex sets used by the separating-axis collision tests during scene
generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mise import TriangleMesh, weld_mesh

Array = np.ndarray

SHAPE_KINDS = ("box", "sphere", "cylinder", "bottle", "bowl", "mug")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})


def _lathe(profile: Array, segments: int) -> TriangleMesh:
    """Revolve an (r, z) polyline around +z.

    The profile must start and end on the axis (r = 0) for a closed solid.
    Points are ordered so the swept surface is outward-oriented when the
    profile runs from the bottom of the solid to the top.
    """
    profile = np.asarray(profile, dtype=np.float64)
    ang = 2 * np.pi * np.arange(segments) / segments
    cos, sin = np.cos(ang), np.sin(ang)

    verts = []
    rows = []
    for r, z in profile:
        if r <= 1e-12:
            rows.append(("pole", len(verts)))
            verts.append([0.0, 0.0, z])
        else:
            rows.append(("ring", len(verts)))
            for c, s in zip(cos, sin):
                verts.append([r * c, r * s, z])
    verts = np.array(verts)

    tris = []
    for (kind_a, ia), (kind_b, ib) in zip(rows[:-1], rows[1:]):
        if kind_a == "ring" and kind_b == "ring":
            for s in range(segments):
                sn = (s + 1) % segments
                tris.append((ia + s, ia + sn, ib + s))
                tris.append((ia + sn, ib + sn, ib + s))
        elif kind_a == "pole" and kind_b == "ring":
            for s in range(segments):
                sn = (s + 1) % segments
                tris.append((ia, ib + sn, ib + s))
        elif kind_a == "ring" and kind_b == "pole":
            for s in range(segments):
                sn = (s + 1) % segments
                tris.append((ia + s, ia + sn, ib))
    return weld_mesh(TriangleMesh(verts, np.array(tris, dtype=np.int64), "world"))


def _box_mesh(lx: float, ly: float, lz: float) -> TriangleMesh:
    hx, hy = lx / 2, ly / 2
    corners = np.array([[sx * hx, sy * hy, z]
                        for z in (0.0, lz)
                        for sy in (-1, 1)
                        for sx in (-1, 1)])
    # Index layout: bit0 = +x, bit1 = +y, bit2 = top.
    quads = [
        (0, 2, 3, 1),  # bottom, outward -z
        (4, 5, 7, 6),  # top, outward +z
        (0, 1, 5, 4),  # -y side
        (2, 6, 7, 3),  # +y side
        (0, 4, 6, 2),  # -x side
        (1, 3, 7, 5),  # +x side
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return TriangleMesh(corners, np.array(tris, dtype=np.int64), "world")


def _handle_mesh(body_radius: float, arc_radius: float, tube_radius: float,
                 z_center: float, arc_segments: int = 12, tube_segments: int = 8) -> TriangleMesh:
    """Open torus segment in the xz plane, ends buried inside the mug body."""
    # Arc center sits on the body wall so both ends penetrate the body.
    cx = body_radius
    span = np.linspace(-0.55 * np.pi, 0.55 * np.pi, arc_segments)
    ring_ang = 2 * np.pi * np.arange(tube_segments) / tube_segments

    verts = []
    for a in span:
        radial = np.array([np.cos(a), 0.0, np.sin(a)])  # away from the arc center
        center = np.array([cx, 0.0, z_center]) + arc_radius * radial
        for t in ring_ang:
            verts.append(center + tube_radius * (np.cos(t) * radial + np.sin(t) * np.array([0.0, 1.0, 0.0])))
    verts = np.array(verts)

    tris = []
    for i in range(arc_segments - 1):
        for s in range(tube_segments):
            sn = (s + 1) % tube_segments
            a0, a1 = i * tube_segments, (i + 1) * tube_segments
            tris.append((a0 + s, a1 + s, a1 + sn))
            tris.append((a0 + s, a1 + sn, a0 + sn))
    return TriangleMesh(verts, np.array(tris, dtype=np.int64), "world")


def make_mesh(spec: ShapeSpec, segments: int = 32) -> TriangleMesh:
    p = spec.params
    if spec.kind == "box":
        return _box_mesh(p["lx"], p["ly"], p["lz"])
    if spec.kind == "sphere":
        r = p["radius"]
        theta = np.linspace(0.0, np.pi, 17)
        profile = np.stack([r * np.sin(theta), r - r * np.cos(theta)], axis=1)
        return _lathe(profile, segments)
    if spec.kind == "cylinder":
        r, h = p["radius"], p["height"]
        profile = [(0, 0), (r, 0), (r, h), (0, h)]
        return _lathe(np.array(profile, dtype=np.float64), segments)
    if spec.kind == "bottle":
        r, h = p["radius"], p["height"]
        rn = p.get("neck_radius", 0.45 * r)
        hn = p.get("neck_height", 0.22 * h)
        body_h = h - hn
        shoulder = 0.25 * hn
        profile = [(0, 0), (r, 0), (r, body_h - shoulder), (rn, body_h + shoulder), (rn, h), (0, h)]
        return _lathe(np.array(profile, dtype=np.float64), segments)
    if spec.kind == "bowl":
        # Straight conical shell: the wall plane meets the table at the base
        # circle, so the wall never overhangs unobservable space.
        r, h, t = p["radius"], p["height"], p.get("wall", 0.01)
        base = 0.5 * r
        profile = [(0, 0), (base, 0), (r, h), (r - t, h), (max(base - t, 0.2 * r), t), (0, t)]
        return _lathe(np.array(profile, dtype=np.float64), segments)
    if spec.kind == "mug":
        r, h, t = p["radius"], p["height"], p.get("wall", 0.009)
        body = _lathe(np.array([(0, 0), (r, 0), (r, h), (r - t, h), (r - t, t), (0, t)], dtype=np.float64), segments)
        handle = _handle_mesh(r, p.get("handle_radius", 0.55 * h / 2), p.get("handle_tube", 0.008), h / 2)
        verts = np.concatenate([body.vertices, handle.vertices], axis=0)
        tris = np.concatenate([body.triangles, handle.triangles + len(body.vertices)], axis=0)
        return TriangleMesh(verts, tris, "world")
    raise ValueError(spec.kind)


def convex_pieces(spec: ShapeSpec, segments: int = 16) -> list[Array]:
    """Convex vertex sets covering the shape, for separating-axis tests."""
    p = spec.params
    if spec.kind == "box":
        return [make_mesh(spec).vertices]
    if spec.kind in ("sphere", "cylinder", "bowl"):
        return [make_mesh(spec, segments=segments).vertices]
    if spec.kind == "bottle":
        r, h = p["radius"], p["height"]
        rn = p.get("neck_radius", 0.45 * r)
        hn = p.get("neck_height", 0.22 * h)
        body_h = h - hn
        body = _lathe(np.array([(0, 0), (r, 0), (r, body_h), (0, body_h)], dtype=np.float64), segments).vertices
        neck = _lathe(np.array([(0, body_h - 0.01), (rn, body_h - 0.01), (rn, h), (0, h)], dtype=np.float64),
                      segments).vertices
        return [body, neck]
    if spec.kind == "mug":
        r, h = p["radius"], p["height"]
        body = _lathe(np.array([(0, 0), (r, 0), (r, h), (0, h)], dtype=np.float64), segments).vertices
        handle = _handle_mesh(r, p.get("handle_radius", 0.55 * h / 2), p.get("handle_tube", 0.008),
                              h / 2, arc_segments=5, tube_segments=6)
        hv = handle.vertices
        thirds = np.array_split(np.arange(len(hv)), 3)
        return [body] + [hv[i] for i in thirds]
    raise ValueError(spec.kind)


def shape_height(spec: ShapeSpec) -> float:
    p = spec.params
    if spec.kind == "box":
        return p["lz"]
    if spec.kind == "sphere":
        return 2 * p["radius"]
    return p["height"]


def random_catalog(rng: np.random.Generator, per_category: int = 4) -> list[ShapeSpec]:
    """Randomized-dimension instances of the four tabletop categories."""
    catalog: list[ShapeSpec] = []
    for _ in range(per_category):
        catalog.append(ShapeSpec("bottle", {
            "radius": rng.uniform(0.028, 0.042),
            "height": rng.uniform(0.13, 0.20),
        }))
        catalog.append(ShapeSpec("cylinder", {  # can
            "radius": rng.uniform(0.028, 0.045),
            "height": rng.uniform(0.09, 0.14),
        }))
        catalog.append(ShapeSpec("bowl", {
            "radius": rng.uniform(0.055, 0.085),
            "height": rng.uniform(0.035, 0.055),
            "wall": rng.uniform(0.009, 0.012),
        }))
        catalog.append(ShapeSpec("mug", {
            "radius": rng.uniform(0.032, 0.047),
            "height": rng.uniform(0.085, 0.115),
            "wall": rng.uniform(0.008, 0.011),
        }))
    return catalog
