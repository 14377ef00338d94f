"""Scene assembly: observations to placed meshes, plus ground-truth scenes.

reconstruct_object runs the placement-free chain: normalize the object cloud,
fit an occupancy field in the canonical frame, extract a mesh, then apply the
inverse normalization (a scaled-identity similarity) to land the mesh back in
world coordinates. build_replica drives the chain per object instance across
fused multi-view clouds. generate_scene produces collision-free upright
ground-truth scenes by rejection sampling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.special import expit

from . import shapes
from .camera import DepthObservation, backproject
from .cloud import (ObjectCloud, NormalizationTransform, compute_normalization, denormalize,
                    fuse, largest_clusters, normalize, remove_statistical_outliers)
from .collision import ConvexPiece, pieces_intersect
from .errors import DegenerateCloud, EmptyField, NoObjects, PlacementExhausted
from .field import (FittedFieldParams, OccupancyField, SupportPrism, above_plane,
                    fit_field, intersection)
from .mise import (MiseConfig, TriangleMesh, connected_components, extract_mesh,
                   triangle_areas)
from .seeding import stream_rng

Array = np.ndarray

logger = logging.getLogger(__name__)

TABLE_PENETRATION_TOLERANCE = 5e-3
MAX_PLACEMENT_REJECTIONS = 10_000


@dataclass(frozen=True)
class PlacedMesh:
    """World-frame reconstruction of one object instance.

    transform is the inverse normalization: a scale * I linear block plus the
    cloud center as translation. mesh.vertices equal the canonical vertices
    pushed through transform.
    """

    mesh: TriangleMesh
    instance_id: int
    transform: Array
    collision_hulls: list[Array]

    def __post_init__(self):
        t = np.asarray(self.transform, dtype=np.float64).reshape(4, 4)
        lin = t[:3, :3]
        scale = lin[0, 0]
        if scale <= 0 or not np.allclose(lin, scale * np.eye(3), atol=1e-12 + 1e-9 * scale):
            raise ValueError("transform linear block must be positive scale * I")
        object.__setattr__(self, "transform", t)

    @property
    def scale(self) -> float:
        return float(self.transform[0, 0])

    @property
    def center(self) -> Array:
        return self.transform[:3, 3]

    def bbox(self) -> tuple[Array, Array]:
        return self.mesh.vertices.min(axis=0), self.mesh.vertices.max(axis=0)


@dataclass(frozen=True)
class SceneReplica:
    objects: list[PlacedMesh]
    table_height: float = 0.0

    def get(self, instance_id: int) -> PlacedMesh:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(f"instance {instance_id} not in replica")

    def instance_ids(self) -> list[int]:
        return [o.instance_id for o in self.objects]


@dataclass(frozen=True)
class PlacedShape:
    spec: shapes.ShapeSpec
    pose: Array  # 4x4, rotation about z only (upright)
    instance_id: int

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64).reshape(4, 4))

    def world_mesh(self, segments: int = 32) -> TriangleMesh:
        return shapes.make_mesh(self.spec, segments=segments).transformed(self.pose, "world")

    def world_pieces(self) -> list[ConvexPiece]:
        rot, t = self.pose[:3, :3], self.pose[:3, 3]
        return [ConvexPiece(v @ rot.T + t) for v in shapes.convex_pieces(self.spec)]


@dataclass(frozen=True)
class GroundTruthScene:
    objects: list[PlacedShape]
    table_height: float = 0.0

    def instance_meshes(self) -> list[tuple[int, Array, Array]]:
        out = []
        for obj in self.objects:
            mesh = obj.world_mesh()
            out.append((obj.instance_id, mesh.vertices, mesh.triangles))
        return out

    def get(self, instance_id: int) -> PlacedShape:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(f"instance {instance_id} not in scene")


def validate_scene(scene: GroundTruthScene) -> None:
    """Raise if any pair collides or any object is not upright on the table."""
    pieces = [(o.instance_id, o.world_pieces()) for o in scene.objects]
    for i in range(len(pieces)):
        for j in range(i + 1, len(pieces)):
            for pa in pieces[i][1]:
                for pb in pieces[j][1]:
                    if pieces_intersect(pa, pb):
                        raise ValueError(f"objects {pieces[i][0]} and {pieces[j][0]} collide")
    for obj in scene.objects:
        rot = obj.pose[:3, :3]
        if not np.allclose(rot[:, 2], [0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError(f"object {obj.instance_id} is not upright")
        if abs(obj.pose[2, 3] - scene.table_height) > 1e-9:
            raise ValueError(f"object {obj.instance_id} does not rest on the table")


def default_field_builder(params: FittedFieldParams | None = None):
    params = params or FittedFieldParams()

    def build(points: Array, view_origins: Array | None = None) -> OccupancyField:
        return fit_field(points, params, view_origins)

    return build


class ObservationCarving:
    """Free-space evidence from depth views: a ray that hit a surface certifies
    everything in front of the hit as empty.

    Fitted plane evidence extrapolates material into unobserved space (under a
    rim, beside a silhouette); intersecting the fitted field with this carving
    field removes any claimed material that some camera demonstrably saw
    through. The margin backs off by the sensor noise scale so the object's
    own surface band is never carved. Rays whose return matches the analytic
    table depth get a tighter, height-based bound: the whole segment above
    ~2 mm over the table is certified free, which stops table-level skirts
    that would otherwise hide inside the ray margin.
    """

    def __init__(self, observations: list[DepthObservation], table_height: float = 0.0,
                 margin: float = 0.012, table_tol: float = 0.010,
                 steepness: float = 400.0):
        self._views = []
        for obs in observations:
            depth = np.where(obs.valid_mask, obs.depth, np.nan)
            intr = obs.intrinsics
            uu, vv = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                                 np.arange(intr.height, dtype=np.float64))
            dirs_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy,
                                 np.ones_like(uu)], axis=-1)
            dz_world = dirs_cam.reshape(-1, 3) @ obs.pose.rotation.T[:, 2]
            dz_world = dz_world.reshape(uu.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                d_table = (table_height - obs.pose.translation[2]) / dz_world
            d_table = np.where((np.abs(dz_world) > 1e-9) & (d_table > 0), d_table, np.nan)
            table_pix = np.abs(depth - d_table) < table_tol
            self._views.append((obs.pose.rotation.T, obs.pose.translation,
                                intr, depth, table_pix))
        self.table_height = table_height
        self.margin = margin
        self.steepness = steepness  # 1/m, softness of the carve boundary

    def field(self, t: NormalizationTransform) -> OccupancyField:
        views = self._views
        margin, steep = self.margin, self.steepness
        z_low = self.table_height + 0.002

        class _Carved(OccupancyField):
            def eval(self, points: Array) -> Array:
                q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
                world = denormalize(q, t)
                occ = np.ones(len(q))
                for rot_t, cam_t, intr, depth, table_pix in views:
                    pc = (world - cam_t) @ rot_t.T
                    z = pc[:, 2]
                    ok = z > 1e-6
                    u = np.where(ok, pc[:, 0] / np.where(ok, z, 1.0) * intr.fx + intr.cx, -1)
                    v = np.where(ok, pc[:, 1] / np.where(ok, z, 1.0) * intr.fy + intr.cy, -1)
                    ui = np.clip(np.rint(u).astype(np.int64), 0, intr.width - 1)
                    vi = np.clip(np.rint(v).astype(np.int64), 0, intr.height - 1)
                    ok &= (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)
                    d_pix = depth[vi, ui]
                    known = ok & np.isfinite(d_pix)
                    # occupancy 0 well in front of the observed hit, 1 behind
                    view_occ = expit(steep * (z - (d_pix - margin)))
                    on_table_ray = known & table_pix[vi, ui]
                    table_occ = expit(steep * (z_low - world[:, 2]))
                    view_occ = np.where(on_table_ray, np.minimum(view_occ, table_occ), view_occ)
                    occ = np.where(known, np.minimum(occ, view_occ), occ)
                return occ

        return _Carved()


def simplify_collision(mesh: TriangleMesh) -> list[Array]:
    """One convex hull vertex set per connected mesh component."""
    if mesh.is_empty:
        raise ValueError("cannot simplify an empty mesh")
    hulls = []
    for tri_idx in connected_components(mesh):
        verts = mesh.vertices[np.unique(mesh.triangles[tri_idx])]
        try:
            hull = ConvexHull(verts)
            hulls.append(verts[hull.vertices])
        except QhullError:
            hulls.append(verts)
    return hulls


def drop_speckles(mesh: TriangleMesh, keep_ratio: float = 0.05) -> TriangleMesh:
    """Remove components below keep_ratio of the largest component's area.

    Fields fitted to residual sensor noise speckle with small floating shells
    that a learned reconstruction prior would suppress; anything that small is
    noise at this pipeline's scale, not object geometry.
    """
    comps = connected_components(mesh)
    if len(comps) <= 1:
        return mesh
    areas = [float(triangle_areas(TriangleMesh(mesh.vertices, mesh.triangles[c], mesh.frame_tag)).sum())
             for c in comps]
    cutoff = keep_ratio * max(areas)
    keep = np.concatenate([c for c, a in zip(comps, areas) if a >= cutoff])
    tris = mesh.triangles[np.sort(keep)]
    used = np.unique(tris)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[tris], mesh.frame_tag)


def reconstruct_object(cloud: ObjectCloud, field_builder=None,
                       mise_cfg: MiseConfig | None = None,
                       speckle_ratio: float = 0.05,
                       support_z: float | None = None,
                       carving: ObservationCarving | None = None) -> PlacedMesh:
    """Normalize, fit, extract in the canonical frame, place back in world.

    When support_z (world table height) is given, the field is intersected
    with the occupied halfspace above the table: cameras never observe the
    support face, and clamping there both closes the bottom exactly at the
    table and stops wall evidence from leaking below it. An observation
    carving removes material the cameras saw through.
    """
    field_builder = field_builder or default_field_builder()
    mise_cfg = mise_cfg or MiseConfig()

    t = compute_normalization(cloud)
    norm_pts = normalize(cloud.points, t)
    norm_views = normalize(cloud.view_origins, t) if cloud.view_origins is not None else None
    occupancy = field_builder(norm_pts, norm_views)
    if carving is not None:
        occupancy = intersection(occupancy, carving.field(t))
    if support_z is not None:
        occupancy = intersection(occupancy, SupportPrism(norm_pts))
        z0 = (support_z - t.center[2]) / t.scale
        if z0 > -0.7:
            occupancy = intersection(occupancy, above_plane(z0))
    mesh_canonical = extract_mesh(occupancy, mise_cfg)
    if speckle_ratio > 0:
        mesh_canonical = drop_speckles(mesh_canonical, speckle_ratio)
    transform = t.matrix_world_from_canonical()
    mesh_world = mesh_canonical.transformed(transform, "world")
    return PlacedMesh(mesh_world, cloud.instance_id, transform, simplify_collision(mesh_world))


def fuse_observations(observations: list[DepthObservation]) -> dict[int, ObjectCloud]:
    """Back-project every view and fuse the per-instance clouds."""
    per_instance: dict[int, list[ObjectCloud]] = {}
    for obs in observations:
        for iid, cloud in backproject(obs).items():
            per_instance.setdefault(iid, []).append(cloud)
    return {iid: fuse(clouds) for iid, clouds in sorted(per_instance.items())}


def build_replica_from_clouds(clouds: dict[int, ObjectCloud], field_builder=None,
                              mise_cfg: MiseConfig | None = None,
                              outlier_k: int = 20, outlier_std: float = 2.0,
                              outlier_removal: bool = True,
                              outlier_passes: int = 2,
                              close_bottom: bool = True,
                              table_height: float = 0.0,
                              threads: int = 1,
                              carving: ObservationCarving | None = None) -> SceneReplica:
    field_builder = field_builder or default_field_builder()
    mise_cfg = mise_cfg or MiseConfig()

    def build_one(iid: int) -> PlacedMesh | None:
        cloud = clouds[iid]
        if outlier_removal:
            # Pass 1 culls far outliers; with those gone the statistics
            # tighten and a second pass removes the near fliers that would
            # otherwise skew the normalization bounds. Detached ghost patches
            # (mislabeled boundary pixels on neighboring surfaces) survive
            # point statistics and are dropped by cluster size instead.
            for _ in range(max(outlier_passes, 1)):
                cloud, removed = remove_statistical_outliers(cloud, outlier_k, outlier_std)
                if len(removed):
                    logger.info("instance %d: removed %d outlier points", iid, len(removed))
            cloud = largest_clusters(cloud)
        support_z = table_height if close_bottom else None
        try:
            return reconstruct_object(cloud, field_builder, mise_cfg,
                                      support_z=support_z, carving=carving)
        except (DegenerateCloud, EmptyField) as exc:
            logger.warning("instance %d skipped: %s", iid, exc)
            return None

    ids = sorted(clouds)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(ids, pool.map(build_one, ids)))
    else:
        results = {iid: build_one(iid) for iid in ids}

    objects = [results[iid] for iid in ids if results[iid] is not None]
    if not objects:
        raise NoObjects("no object instance could be reconstructed")
    return SceneReplica(objects, table_height)


def build_replica(observations: list[DepthObservation], field_builder=None,
                  mise_cfg: MiseConfig | None = None,
                  outlier_k: int = 20, outlier_std: float = 2.0,
                  outlier_removal: bool = True,
                  outlier_passes: int = 2,
                  close_bottom: bool = True,
                  table_height: float = 0.0,
                  threads: int = 1,
                  carve_free_space: bool = True) -> SceneReplica:
    """Observations to replica: fuse, denoise, reconstruct, place, per object."""
    if not observations:
        raise NoObjects("no observations")
    clouds = fuse_observations(observations)
    if not clouds:
        raise NoObjects("observations contain no object pixels")
    carving = ObservationCarving(observations, table_height) if carve_free_space else None
    return build_replica_from_clouds(
        clouds, field_builder, mise_cfg, outlier_k, outlier_std,
        outlier_removal, outlier_passes, close_bottom, table_height, threads,
        carving=carving)


def generate_scene(catalog: list[shapes.ShapeSpec], n_objects: int,
                   bounds: tuple[float, float], rng_seed: int,
                   table_height: float = 0.0) -> GroundTruthScene:
    """Rejection-sample an upright, collision-free tabletop arrangement."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if not catalog:
        raise ValueError("catalog is empty")
    rng = stream_rng(rng_seed, "scene")
    half_x, half_y = bounds[0] / 2.0, bounds[1] / 2.0

    placed: list[PlacedShape] = []
    placed_pieces: list[list[ConvexPiece]] = []
    base_pieces = {i: shapes.convex_pieces(spec) for i, spec in enumerate(catalog)}

    for instance_id in range(1, n_objects + 1):
        choice = int(rng.integers(len(catalog)))
        spec = catalog[choice]
        for _attempt in range(MAX_PLACEMENT_REJECTIONS):
            x = rng.uniform(-half_x, half_x)
            y = rng.uniform(-half_y, half_y)
            yaw = rng.uniform(0.0, 2 * np.pi)
            c, s = np.cos(yaw), np.sin(yaw)
            pose = np.array([
                [c, -s, 0.0, x],
                [s, c, 0.0, y],
                [0.0, 0.0, 1.0, table_height],
                [0.0, 0.0, 0.0, 1.0],
            ])
            rot, t = pose[:3, :3], pose[:3, 3]
            pieces = [ConvexPiece(v @ rot.T + t) for v in base_pieces[choice]]
            hit = any(
                pieces_intersect(pa, pb)
                for other in placed_pieces for pa in pieces for pb in other
            )
            if not hit:
                placed.append(PlacedShape(spec, pose, instance_id))
                placed_pieces.append(pieces)
                break
        else:
            raise PlacementExhausted(
                f"object {instance_id} rejected {MAX_PLACEMENT_REJECTIONS} times")
    return GroundTruthScene(placed, table_height)
