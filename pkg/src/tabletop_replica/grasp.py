"""Grasp label factory over a scene replica.

Candidates come from antipodal surface sampling on the target mesh. Each
candidate is scored by a quasi-static oracle under pose jitter: a trial
succeeds when the approach sweep is collision-free, the closed jaws make an
antipodal force-closure contact pair inside the friction cone, and a straight
vertical lift stays clear of the neighbors. Mean success over trials is
thresholded into the binary label, and positive labels are rasterized into a
fixed-size voxel grid centered on the target's bounding box with negative
completion everywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.spatial import cKDTree

from .camera import prepare_raycast, raycast_mesh
from .collision import ConvexPiece, box_piece, decimate_hull, pieces_intersect
from .errors import NoCandidates
from .mise import TriangleMesh, triangle_areas, triangle_normals
from .replica import SceneReplica
from .seeding import stream_rng

Array = np.ndarray

LIFT_HEIGHT = 0.10
APPROACH_CLEARANCE = 0.01   # extra jaw spread during approach, meters
HULL_MARGIN = 0.001         # inflation of decimated neighbor hulls, meters
DEFAULT_THRESHOLD = 0.7


@dataclass(frozen=True)
class GripperModel:
    max_opening: float = 0.085
    finger_depth: float = 0.046
    finger_thickness: float = 0.012
    palm_clearance: float = 0.02
    friction_mu: float = 0.5

    def __post_init__(self):
        if min(self.max_opening, self.finger_depth, self.finger_thickness,
               self.palm_clearance, self.friction_mu) <= 0:
            raise ValueError("gripper dimensions must be positive")
        if self.friction_mu > 2.0:
            raise ValueError("friction_mu must be in (0, 2]")

    @property
    def cone_cos(self) -> float:
        return 1.0 / math.sqrt(1.0 + self.friction_mu ** 2)


@dataclass(frozen=True)
class GraspJitter:
    sigma_trans: float = 0.003           # meters
    sigma_rot: float = math.radians(2)   # radians


@dataclass(frozen=True)
class GraspCandidate:
    """Gripper pose: column x = closing axis, z = approach direction."""

    pose: Array
    target_instance: int
    opening: float

    def __post_init__(self):
        p = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        r = p[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("candidate rotation is not orthonormal")
        if self.opening <= 0:
            raise ValueError("opening must be positive")
        object.__setattr__(self, "pose", p)

    @property
    def closing_axis(self) -> Array:
        return self.pose[:3, 0]

    @property
    def approach_axis(self) -> Array:
        return self.pose[:3, 2]

    @property
    def translation(self) -> Array:
        return self.pose[:3, 3]


@dataclass(frozen=True)
class GraspLabel:
    candidate: GraspCandidate
    trials: int
    successes: int
    positive: bool = False

    def __post_init__(self):
        if not (0 <= self.successes <= self.trials):
            raise ValueError("successes must be within [0, trials]")

    @property
    def mean_success(self) -> float:
        return self.successes / self.trials


def _orthonormal_in_plane(axis: Array) -> tuple[Array, Array]:
    """Basis (e1, e2) of the plane orthogonal to axis, e1 maximizing +z."""
    z = np.array([0.0, 0.0, 1.0])
    e1 = z - (z @ axis) * axis
    n = np.linalg.norm(e1)
    if n < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
        e1 = x - (x @ axis) * axis
        n = np.linalg.norm(e1)
    e1 = e1 / n
    return e1, np.cross(axis, e1)


def candidate_from_contacts(p: Array, q: Array, approach: Array, target: int) -> GraspCandidate:
    """Build a gripper pose from an antipodal contact pair and approach axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    c = q - p
    opening = float(np.linalg.norm(c))
    c = c / opening
    a = np.asarray(approach, dtype=np.float64)
    a = a - (a @ c) * c
    a = a / np.linalg.norm(a)
    pose = np.eye(4)
    pose[:3, 0] = c
    pose[:3, 1] = np.cross(a, c)
    pose[:3, 2] = a
    pose[:3, 3] = (p + q) / 2
    return GraspCandidate(pose, target, opening)


def sample_grasps(scene: SceneReplica, target: int, gripper: GripperModel,
                  n_candidates: int, rng_seed: int,
                  geometry: "_SceneGeometry | None" = None) -> list[GraspCandidate]:
    """Antipodal candidates on the target mesh, deterministic per seed.

    Surface points are area-weighted samples; the ray opposite each point's
    outward normal must hit an opposing face within the jaw span, with both
    normals inside the friction cone of the closing axis. The approach axis is
    drawn uniformly from the downward half of the plane normal to the closing
    axis.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    mesh = scene.get(target).mesh
    areas = triangle_areas(mesh)
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    tri = mesh.vertices[mesh.triangles]
    if geometry is not None:
        contact = geometry.contact_normals[target]
        prepared = geometry.prepared[target]
    else:
        contact = ContactNormals(mesh, gripper.finger_thickness)
        prepared = prepare_raycast(mesh.vertices, mesh.triangles)

    rng = stream_rng(rng_seed, "sampling", target)
    cone_cos = gripper.cone_cos
    out: list[GraspCandidate] = []
    budget = 100 * n_candidates
    batch = max(n_candidates, 32)
    proposals_used = 0

    while len(out) < n_candidates and proposals_used < budget:
        m = min(batch, budget - proposals_used)
        proposals_used += m

        t_idx = np.searchsorted(cdf, rng.uniform(size=m))
        r1 = rng.uniform(size=m)
        r2 = rng.uniform(size=m)
        theta_r = rng.uniform(size=m)

        su = np.sqrt(r1)
        b0 = 1 - su
        b1 = su * (1 - r2)
        b2 = su * r2
        tris = tri[t_idx]
        p = b0[:, None] * tris[:, 0] + b1[:, None] * tris[:, 1] + b2[:, None] * tris[:, 2]
        n = contact.at(t_idx)

        origins = p - 1e-6 * n
        t_hit, hit_idx = raycast_mesh(origins, -n, prepared=prepared)
        ok = np.isfinite(t_hit) & (np.where(np.isfinite(t_hit), t_hit, np.inf) <= gripper.max_opening)

        for i in np.nonzero(ok)[0]:
            if len(out) >= n_candidates:
                break
            q = origins[i] - t_hit[i] * n[i]
            c = q - p[i]
            norm_c = np.linalg.norm(c)
            if norm_c <= 1e-9 or norm_c > gripper.max_opening:
                continue
            c = c / norm_c
            nq = contact.at(hit_idx[i])
            if nq @ c < cone_cos:
                continue
            e1, e2 = _orthonormal_in_plane(c)
            if e1 @ np.array([0.0, 0.0, 1.0]) > 1e-9:
                theta = np.pi / 2 + theta_r[i] * np.pi  # cos(theta) <= 0: downward half
            else:
                theta = theta_r[i] * 2 * np.pi
            approach = math.cos(theta) * e1 + math.sin(theta) * e2
            out.append(candidate_from_contacts(p[i], q, approach, target))

    if len(out) < n_candidates:
        raise NoCandidates(
            f"{len(out)}/{n_candidates} candidates after {proposals_used} proposals")
    return out


class ContactNormals:
    """Surface normals smoothed over a pad-sized neighborhood.

    Raw triangle normals of a reconstructed mesh wobble at the sensor-noise
    scale; a finger pad contacts an area, so the oracle judges the friction
    cone against the area-weighted normal of the triangles around the contact.
    Meshes whose triangles are larger than the pad (primitive boxes) fall
    back to the exact hit-triangle normal.
    """

    _SMOOTH_K = 36

    def __init__(self, mesh: TriangleMesh, radius: float):
        normals = triangle_normals(mesh)
        tri = mesh.vertices[mesh.triangles]
        centroids = tri.mean(axis=1)
        areas = triangle_areas(mesh)
        if len(tri) > self._SMOOTH_K:
            k = self._SMOOTH_K
            dists, idx = cKDTree(centroids).query(centroids, k=k)
            w = np.where(dists <= radius, areas[idx], 0.0)
            w[:, 0] = np.maximum(w[:, 0], 1e-12)  # a triangle always counts itself
            smoothed = np.einsum("tk,tki->ti", w, normals[idx])
            norms = np.linalg.norm(smoothed, axis=1, keepdims=True)
            normals = np.where(norms > 1e-12, smoothed / np.maximum(norms, 1e-300), normals)
        self.normals = normals

    def at(self, hit_triangle) -> Array:
        return self.normals[hit_triangle]


class _SceneGeometry:
    """Cached collision geometry: decimated inflated hulls per instance."""

    def __init__(self, scene: SceneReplica, gripper: GripperModel | None = None):
        pad = gripper.finger_thickness if gripper else 0.012
        self.table_height = scene.table_height
        self.hulls: dict[int, list[ConvexPiece]] = {}
        for obj in scene.objects:
            self.hulls[obj.instance_id] = [
                ConvexPiece(decimate_hull(h, max_vertices=64, inflate=HULL_MARGIN))
                for h in obj.collision_hulls
            ]
        self.meshes = {obj.instance_id: obj.mesh for obj in scene.objects}
        self.contact_normals = {obj.instance_id: ContactNormals(obj.mesh, pad)
                                for obj in scene.objects}
        self.prepared = {obj.instance_id: prepare_raycast(obj.mesh.vertices, obj.mesh.triangles)
                         for obj in scene.objects}

    def neighbors(self, target: int) -> list[ConvexPiece]:
        out: list[ConvexPiece] = []
        for iid, pieces in self.hulls.items():
            if iid != target:
                out.extend(pieces)
        return out


def _gripper_boxes(gripper: GripperModel, rot: Array, origin: Array,
                   spread: float) -> list[ConvexPiece]:
    """Finger and palm boxes in world frame at the given jaw spread."""
    c, b, a = rot[:, 0], rot[:, 1], rot[:, 2]
    ft = gripper.finger_thickness
    fd = gripper.finger_depth
    half = np.array([ft / 2, ft / 2, fd / 2])
    boxes = [
        box_piece(origin - (spread / 2 + ft / 2) * c, rot, half),
        box_piece(origin + (spread / 2 + ft / 2) * c, rot, half),
        box_piece(origin - (fd / 2 + gripper.palm_clearance / 2) * a, rot,
                  np.array([spread / 2 + ft, ft / 2, gripper.palm_clearance / 2])),
    ]
    return boxes


def _collides(pieces: list[ConvexPiece], obstacles: list[ConvexPiece],
              table_height: float | None) -> bool:
    for p in pieces:
        if table_height is not None and p.min_z() < table_height:
            return True
        for o in obstacles:
            if pieces_intersect(p, o):
                return True
    return False


def _jittered_pose(pose: Array, jitter: GraspJitter, rng: np.random.Generator) -> Array:
    dt = jitter.sigma_trans * rng.standard_normal(3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = jitter.sigma_rot * rng.standard_normal()
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    r_j = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    out = pose.copy()
    out[:3, :3] = r_j @ pose[:3, :3]
    out[:3, 3] = pose[:3, 3] + dt
    return out


def prepare_scene_geometry(scene: SceneReplica, gripper: GripperModel) -> "_SceneGeometry":
    """Precompute collision hulls, smoothed normals, and raycast data once."""
    return _SceneGeometry(scene, gripper)


def evaluate_grasp(scene: SceneReplica, candidate: GraspCandidate, gripper: GripperModel,
                   trials: int = 10, jitter: GraspJitter | None = None,
                   rng_seed: int = 0, candidate_index: int = 0,
                   geometry: "_SceneGeometry | None" = None) -> GraspLabel:
    """Score one candidate over jittered trials (threshold applied separately).

    A trial succeeds when (a) the gripper sweep along the approach axis is
    collision-free against non-target objects and the table, (b) the closing
    rays hit the target at an antipodal pair with both contact normals inside
    the friction cone of the closing axis, and (c) gripper and grasped object
    swept 10 cm upward stay clear of the neighbors.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jitter = jitter or GraspJitter()
    geom = geometry or _SceneGeometry(scene, gripper)
    target = candidate.target_instance
    mesh = geom.meshes[target]
    contact = geom.contact_normals[target]
    neighbors = geom.neighbors(target)
    target_hulls = geom.hulls[target]
    cone_cos = gripper.cone_cos
    lift = np.array([0.0, 0.0, LIFT_HEIGHT])
    spread = min(candidate.opening + APPROACH_CLEARANCE, gripper.max_opening)

    rng = stream_rng(rng_seed, "evaluation", target, candidate_index)
    poses = [_jittered_pose(candidate.pose, jitter, rng) for _ in range(trials)]

    # Contact rays for all trials in one cast.
    origins = np.array([p[:3, 3] for p in poses])
    closing = np.array([p[:3, 0] for p in poses])
    ray_origins = np.concatenate([origins - (spread / 2) * closing,
                                  origins + (spread / 2) * closing])
    ray_dirs = np.concatenate([closing, -closing])
    t_hit, hit_idx = raycast_mesh(ray_origins, ray_dirs, prepared=geom.prepared[target])

    successes = 0
    for k, pose in enumerate(poses):
        rot, origin = pose[:3, :3], pose[:3, 3]
        c_axis, a_axis = rot[:, 0], rot[:, 2]

        # (b) antipodal contact under friction (cheapest checks first)
        t1, t2 = t_hit[k], t_hit[trials + k]
        if not (np.isfinite(t1) and np.isfinite(t2)):
            continue
        if t1 + t2 > spread - 1e-9:
            continue
        n1 = contact.at(hit_idx[k])
        n2 = contact.at(hit_idx[trials + k])
        if n1 @ c_axis > -cone_cos or n2 @ c_axis < cone_cos:
            continue

        # (a) approach sweep against non-target objects and the table
        boxes = _gripper_boxes(gripper, rot, origin, spread)
        swept = [b.swept(-gripper.finger_depth * a_axis) for b in boxes]
        if _collides(swept, neighbors, geom.table_height):
            continue

        # (c) vertical lift clearance against the neighbors
        contact_spread = spread - float(t1 + t2)
        closed = _gripper_boxes(gripper, rot, origin, contact_spread)
        lifted = [b.swept(lift) for b in closed]
        lifted += [h.swept(lift) for h in target_hulls]
        if _collides(lifted, neighbors, None):
            continue

        successes += 1
    return GraspLabel(candidate, trials, successes)


def filter_labels(labels: list[GraspLabel], threshold: float = DEFAULT_THRESHOLD) -> list[GraspLabel]:
    """Apply the mean-success threshold; boundary is inclusive, order kept."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must be in [0, 1]")
    return [replace(l, positive=l.mean_success >= threshold) for l in labels]


def generate_labels(scene: SceneReplica, target: int, gripper: GripperModel,
                    n_candidates: int, trials: int = 10,
                    jitter: GraspJitter | None = None,
                    threshold: float = DEFAULT_THRESHOLD,
                    rng_seed: int = 0, threads: int = 1,
                    geometry: "_SceneGeometry | None" = None) -> list[GraspLabel]:
    """Sample, evaluate (parallel over candidates), and threshold labels."""
    geom = geometry or _SceneGeometry(scene, gripper)
    candidates = sample_grasps(scene, target, gripper, n_candidates, rng_seed, geometry=geom)

    def score(i: int) -> GraspLabel:
        return evaluate_grasp(scene, candidates[i], gripper, trials, jitter,
                              rng_seed, candidate_index=i, geometry=geom)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            labels = list(pool.map(score, range(len(candidates))))
    else:
        labels = [score(i) for i in range(len(candidates))]
    return filter_labels(labels, threshold)


@dataclass
class VoxelLabelGrid:
    """Cubic label grid centered on the target's bounding-box center.

    Cells without a positive grasp are negative; a cell with at least one
    positive label stores the representative pose (highest mean success, ties
    to the lowest label index). Positive + negative counts always equal
    dimension^3; labels falling outside the span are counted, not stored.
    """

    origin: Array
    dimension: int = 40
    voxel_size: float = 0.0075
    positive_cells: dict = None
    out_of_grid: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.positive_cells is None:
            self.positive_cells = {}

    @property
    def span(self) -> float:
        return self.dimension * self.voxel_size

    @property
    def positive_count(self) -> int:
        return len(self.positive_cells)

    @property
    def negative_count(self) -> int:
        return self.dimension ** 3 - self.positive_count

    def voxel_index(self, point: Array) -> tuple[int, int, int] | None:
        rel = (np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size \
            + self.dimension / 2
        idx = np.floor(rel).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= self.dimension):
            return None
        return int(idx[0]), int(idx[1]), int(idx[2])


def rasterize_labels(labels: list[GraspLabel], target_bbox_center: Array,
                     dimension: int = 40, voxel_size: float = 0.0075) -> VoxelLabelGrid:
    grid = VoxelLabelGrid(origin=target_bbox_center, dimension=dimension, voxel_size=voxel_size)
    for index, label in enumerate(labels):
        if not label.positive:
            continue
        key = grid.voxel_index(label.candidate.translation)
        if key is None:
            grid.out_of_grid += 1
            continue
        if key in grid.positive_cells:
            _, best_ms, best_idx = grid.positive_cells[key]
            if (label.mean_success, -index) <= (best_ms, -best_idx):
                continue
        grid.positive_cells[key] = (label.candidate.pose.copy(), label.mean_success, index)
    return grid
