"""Pinhole camera model: depth back-projection and ground-truth depth rendering.

Conventions (shared by both directions so round trips are exact):
  - integer pixel coordinates (u, v) denote pixel centers,
  - camera frame is OpenCV-style: +x right, +y down, +z forward,
  - the camera ray of pixel (u, v) is ((u - cx)/fx, (v - cy)/fy, 1), so the
    ray parameter equals depth along the optical axis,
  - invalid depth is a non-finite value, never zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

_ROT_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the raster")


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world transform: p_W = rotation @ p_C + translation."""

    rotation: Array
    translation: Array

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ROT_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ROT_TOL:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def matrix(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: Array) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return RigidPose(m[:3, :3], m[:3, 3])

    def apply(self, points: Array) -> Array:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse_apply(self, points: Array) -> Array:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(frozen=True)
class DepthObservation:
    """One posed depth + instance-segmentation view.

    depth: (h, w) float array in meters; non-positive or non-finite = invalid.
    segmentation: (h, w) integer instance ids; 0 = background/table.
    """

    depth: Array
    segmentation: Array
    intrinsics: CameraIntrinsics
    pose: RigidPose

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        s = np.asarray(self.segmentation)
        shape = (self.intrinsics.height, self.intrinsics.width)
        if d.shape != shape or s.shape != shape:
            raise ValueError(f"raster shapes {d.shape}/{s.shape} do not match intrinsics {shape}")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "segmentation", np.ascontiguousarray(s, dtype=np.uint16))

    @property
    def valid_mask(self) -> Array:
        return np.isfinite(self.depth) & (self.depth > 0)


def look_at_pose(eye: Array, target: Array, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose with +z (view axis) from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:  # looking straight along up: pick any right
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return RigidPose(rot, eye)


def backproject(obs: DepthObservation) -> dict[int, "ObjectCloud"]:
    """Lift every valid, non-background pixel into a world-frame point.

    Returns one ObjectCloud per instance id. The view origin (camera center)
    is recorded per point so downstream normal orientation can face the
    viewpoint that saw each point.
    """
    from .cloud import ObjectCloud

    k = obs.intrinsics
    valid = obs.valid_mask & (obs.segmentation > 0)
    if not valid.any():
        return {}
    v_idx, u_idx = np.nonzero(valid)
    d = obs.depth[v_idx, u_idx]
    x = (u_idx - k.cx) * d / k.fx
    y = (v_idx - k.cy) * d / k.fy
    pts_cam = np.stack([x, y, d], axis=1)
    pts_world = obs.pose.apply(pts_cam)
    ids = obs.segmentation[v_idx, u_idx]

    out: dict[int, ObjectCloud] = {}
    origin = obs.pose.translation
    for iid in np.unique(ids):
        sel = ids == iid
        pts = pts_world[sel]
        origins = np.broadcast_to(origin, pts.shape).copy()
        out[int(iid)] = ObjectCloud(points=pts, instance_id=int(iid), view_origins=origins)
    return out


def project(points_world: Array, intrinsics: CameraIntrinsics, pose: RigidPose) -> tuple[Array, Array, Array]:
    """World points to (u, v, depth) under the pixel-center convention."""
    pc = pose.inverse_apply(points_world)
    z = pc[:, 2]
    u = pc[:, 0] / z * intrinsics.fx + intrinsics.cx
    v = pc[:, 1] / z * intrinsics.fy + intrinsics.cy
    return u, v, z


# --- ground-truth rendering -------------------------------------------------

_MT_EPS = 1e-12


def _ray_dirs(intrinsics: CameraIntrinsics) -> Array:
    """Unnormalized camera-frame ray directions, one per pixel, z component 1."""
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack(
        [(uu - intrinsics.cx) / intrinsics.fx, (vv - intrinsics.cy) / intrinsics.fy, np.ones_like(uu)],
        axis=-1,
    )


def prepare_raycast(vertices: Array, triangles: Array) -> tuple[Array, Array, Array]:
    """Precompute per-triangle data reused across raycast_mesh calls."""
    tri = np.asarray(vertices, dtype=np.float64)[triangles]
    return tri[:, 0].copy(), (tri[:, 1] - tri[:, 0]), (tri[:, 2] - tri[:, 0])


def raycast_mesh(origins: Array, dirs: Array, vertices: Array | None = None,
                 triangles: Array | None = None,
                 prepared: tuple[Array, Array, Array] | None = None,
                 chunk: int = 4_000_000) -> tuple[Array, Array]:
    """Nearest-hit Moller-Trumbore for a batch of rays against one mesh.

    Returns (t, tri_index); t = +inf and index = -1 for misses. Directions
    need not be unit length; t is in units of |dir|.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    if prepared is None:
        prepared = prepare_raycast(vertices, triangles)
    v0, e1, e2 = prepared
    n_tris = len(v0)

    best_t = np.full(n_rays, np.inf)
    best_i = np.full(n_rays, -1, dtype=np.int64)
    if n_tris == 0 or n_rays == 0:
        return best_t, best_i

    rows = max(1, chunk // max(n_tris, 1))
    for start in range(0, n_rays, rows):
        o = origins[start:start + rows][:, None, :]   # (r, 1, 3)
        d = dirs[start:start + rows][:, None, :]
        pvec = np.cross(d, e2[None, :, :])
        det = np.einsum("rtk,tk->rt", pvec, e1)
        ok = np.abs(det) > _MT_EPS
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - v0[None, :, :]
        bu = np.einsum("rtk,rtk->rt", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        bv = np.einsum("rtk,rtk->rt", qvec, d) * inv_det
        t = np.einsum("rtk,tk->rt", qvec, e2) * inv_det
        hit = ok & (bu >= -1e-12) & (bv >= -1e-12) & (bu + bv <= 1 + 1e-12) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(len(idx)), idx]
        sl = slice(start, start + len(idx))
        better = tmin < best_t[sl]
        best_t[sl] = np.where(better, tmin, best_t[sl])
        best_i[sl] = np.where(better, idx, best_i[sl])
    return best_t, best_i


def render_depth(scene: "GroundTruthScene", intrinsics: CameraIntrinsics,
                 pose: RigidPose) -> DepthObservation:
    """Exact ray-cast depth + segmentation of a ground-truth scene.

    Depth is distance along the optical axis; the table is the plane
    z = table_height (instance 0); pixels that hit nothing are NaN.
    """
    from .replica import GroundTruthScene  # noqa: F401  (type only)

    meshes = scene.instance_meshes()
    eye = pose.translation
    for _, verts, _ in meshes:
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        if np.all(eye >= lo) and np.all(eye <= hi):
            raise ValueError("camera pose is inside an object's bounding box")

    dirs_cam = _ray_dirs(intrinsics)
    dirs_world = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    n_rays = dirs_world.shape[0]
    origins = np.broadcast_to(eye, (n_rays, 3))

    depth = np.full(n_rays, np.inf)
    seg = np.zeros(n_rays, dtype=np.uint16)

    # Table plane z = table_height: o_z + t * d_z = h.
    dz = dirs_world[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = (scene.table_height - eye[2]) / dz
    t_table = np.where((np.abs(dz) > 1e-12) & (t_table > 1e-9), t_table, np.inf)
    depth = np.minimum(depth, t_table)

    for instance_id, verts, tris in meshes:
        # Cull rays missing the object's AABB (slab test).
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs_world
        t0 = (lo - eye) * inv
        t1 = (hi - eye) * inv
        tnear = np.nanmax(np.minimum(t0, t1), axis=1)
        tfar = np.nanmin(np.maximum(t0, t1), axis=1)
        cand = (tfar >= np.maximum(tnear, 0)) & (tnear < depth)
        if not cand.any():
            continue
        t_hit, _ = raycast_mesh(origins[cand], dirs_world[cand], verts, tris)
        closer = t_hit < depth[cand]
        idx = np.nonzero(cand)[0][closer]
        depth[idx] = t_hit[closer]
        seg[idx] = instance_id

    depth = np.where(np.isfinite(depth), depth, np.nan)
    h, w = intrinsics.height, intrinsics.width
    return DepthObservation(depth.reshape(h, w), seg.reshape(h, w), intrinsics, pose)


def ring_cameras(n: int, radius: float, height: float, target=(0.0, 0.0, 0.0),
                 intrinsics: CameraIntrinsics | None = None) -> list[tuple[CameraIntrinsics, RigidPose]]:
    """n cameras evenly spaced on a ring above the table, all aimed at target."""
    if intrinsics is None:
        intrinsics = CameraIntrinsics(fx=160.0, fy=160.0, cx=80.0, cy=60.0, width=160, height=120)
    target = np.asarray(target, dtype=np.float64)
    out = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        eye = target + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        out.append((intrinsics, look_at_pose(eye, target)))
    return out
