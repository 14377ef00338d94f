"""File formats: rasters with JSON sidecars, binary PLY, scene/replica JSON,
label JSONL, and the voxel-grid binary.

All binary payloads are little-endian and row-major; JSON writing is
deterministic (fixed key order, plain floats) so repeated runs are
byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .camera import CameraIntrinsics, DepthObservation, RigidPose
from .cloud import ObjectCloud
from .grasp import GraspCandidate, GraspLabel, VoxelLabelGrid
from .mise import TriangleMesh
from .replica import GroundTruthScene, PlacedMesh, PlacedShape, SceneReplica
from .shapes import ShapeSpec

Array = np.ndarray

VOXEL_GRID_MAGIC = b"VLG1"


# --- observations -------------------------------------------------------------

def save_observation(obs: DepthObservation, stem: Path) -> list[Path]:
    """Write <stem>_depth.f32, <stem>_seg.u16 and the shared JSON sidecar."""
    stem = Path(stem)
    depth_path = stem.with_name(stem.name + "_depth.f32")
    seg_path = stem.with_name(stem.name + "_seg.u16")
    meta_path = stem.with_name(stem.name + ".json")
    obs.depth.astype("<f4").tofile(depth_path)
    obs.segmentation.astype("<u2").tofile(seg_path)
    k = obs.intrinsics
    meta = {
        "width": k.width, "height": k.height,
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
        "pose": [float(x) for x in obs.pose.matrix().reshape(-1)],
    }
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return [depth_path, seg_path, meta_path]


def load_observation(stem: Path) -> DepthObservation:
    stem = Path(stem)
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    k = CameraIntrinsics(fx=meta["fx"], fy=meta["fy"], cx=meta["cx"], cy=meta["cy"],
                         width=meta["width"], height=meta["height"])
    pose = RigidPose.from_matrix(np.array(meta["pose"], dtype=np.float64).reshape(4, 4))
    depth = np.fromfile(stem.with_name(stem.name + "_depth.f32"), dtype="<f4")
    seg = np.fromfile(stem.with_name(stem.name + "_seg.u16"), dtype="<u2")
    shape = (k.height, k.width)
    return DepthObservation(depth.reshape(shape).astype(np.float64),
                            seg.reshape(shape), k, pose)


def find_observations(directory: Path, prefix: str = "view") -> list[Path]:
    """Observation stems found under directory, sorted by name."""
    directory = Path(directory)
    stems = []
    for meta in sorted(directory.glob(f"{prefix}*.json")):
        stems.append(meta.with_suffix(""))
    return stems


# --- PLY ----------------------------------------------------------------------

def save_cloud_ply(cloud: ObjectCloud, path: Path) -> None:
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property ushort instance\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("instance", "<u2")])
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    rec["instance"] = cloud.instance_id
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def _parse_ply_header(f) -> tuple[dict, int]:
    if f.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    fmt = None
    while True:
        line = f.readline()
        if not line:
            raise ValueError("truncated PLY header")
        parts = line.decode("ascii").strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], f"list:{parts[2]}:{parts[3]}"))
            else:
                elements[-1][2].append((parts[-1], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt}")
    return {name: (count, props) for name, count, props in elements}, 0


_PLY_SCALAR = {"float": "<f4", "float32": "<f4", "double": "<f8",
               "ushort": "<u2", "uint16": "<u2", "uchar": "<u1", "uint8": "<u1",
               "int": "<i4", "int32": "<i4", "uint": "<u4"}


def load_cloud_ply(path: Path) -> ObjectCloud:
    with open(path, "rb") as f:
        elements, _ = _parse_ply_header(f)
        count, props = elements["vertex"]
        dtype = np.dtype([(name, _PLY_SCALAR[t]) for name, t in props])
        rec = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    instance = int(rec["instance"][0]) if "instance" in rec.dtype.names and count else 1
    return ObjectCloud(pts, instance)


def save_mesh_ply(mesh: TriangleMesh, path: Path, components: Array | None = None) -> None:
    """Binary PLY; optional per-vertex component ids (for hull bundles)."""
    n, m = len(mesh.vertices), len(mesh.triangles)
    comp_line = "property ushort component\n" if components is not None else ""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"{comp_line}"
        f"element face {m}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if components is not None:
        fields.append(("component", "<u2"))
    vrec = np.empty(n, dtype=fields)
    vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T.astype(np.float32)
    if components is not None:
        vrec["component"] = np.asarray(components, dtype=np.uint16)
    frec = np.empty(m, dtype=[("count", "<u1"), ("idx", "<i4", (3,))])
    frec["count"] = 3
    frec["idx"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vrec.tobytes())
        f.write(frec.tobytes())


def load_mesh_ply(path: Path, frame_tag: str = "world") -> tuple[TriangleMesh, Array | None]:
    with open(path, "rb") as f:
        elements, _ = _parse_ply_header(f)
        count, props = elements["vertex"]
        scalar_props = [(name, t) for name, t in props if not t.startswith("list")]
        dtype = np.dtype([(name, _PLY_SCALAR[t]) for name, t in scalar_props])
        vrec = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
        fcount, fprops = elements.get("face", (0, []))
        frec = np.frombuffer(f.read(fcount * 13), dtype=[("count", "<u1"), ("idx", "<i4", (3,))]) \
            if fcount else None
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    tris = frec["idx"].astype(np.int64) if frec is not None else np.empty((0, 3), dtype=np.int64)
    comp = vrec["component"].astype(np.int64) if "component" in vrec.dtype.names else None
    return TriangleMesh(verts, tris, frame_tag), comp


def save_mesh_obj(mesh: TriangleMesh, path: Path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_mesh_sidecar(path: Path, frame_tag: str) -> None:
    Path(path).write_text(json.dumps({"frame_tag": frame_tag}) + "\n")


def save_hulls_ply(hulls: list[Array], path: Path) -> None:
    """All hulls in one PLY, vertices tagged by component id."""
    verts = []
    tris = []
    comps = []
    offset = 0
    for ci, hull_verts in enumerate(hulls):
        hv = np.asarray(hull_verts, dtype=np.float64)
        try:
            simplices = ConvexHull(hv).simplices
        except QhullError:
            simplices = np.empty((0, 3), dtype=np.int64)
        verts.append(hv)
        comps.extend([ci] * len(hv))
        tris.append(simplices + offset)
        offset += len(hv)
    all_tris = np.concatenate(tris) if tris else np.empty((0, 3), dtype=np.int64)
    mesh = TriangleMesh(np.concatenate(verts), all_tris, "world")
    save_mesh_ply(mesh, path, components=np.array(comps))


def load_hulls_ply(path: Path) -> list[Array]:
    mesh, comps = load_mesh_ply(path)
    if comps is None:
        return [mesh.vertices]
    return [mesh.vertices[comps == c] for c in np.unique(comps)]


# --- scene / replica JSON -------------------------------------------------------

def save_scene_json(scene: GroundTruthScene, path: Path) -> None:
    doc = {
        "table_height": scene.table_height,
        "objects": [
            {
                "instance_id": o.instance_id,
                "shape": {"kind": o.spec.kind, "params": o.spec.params},
                "pose": [float(x) for x in o.pose.reshape(-1)],
            }
            for o in scene.objects
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_scene_json(path: Path) -> GroundTruthScene:
    doc = json.loads(Path(path).read_text())
    objects = [
        PlacedShape(
            spec=ShapeSpec(o["shape"]["kind"], o["shape"]["params"]),
            pose=np.array(o["pose"], dtype=np.float64).reshape(4, 4),
            instance_id=int(o["instance_id"]),
        )
        for o in doc["objects"]
    ]
    return GroundTruthScene(objects, float(doc["table_height"]))


def save_replica(replica: SceneReplica, out_dir: Path) -> Path:
    """Write replica.json plus one mesh PLY/OBJ and hull PLY per object."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for obj in replica.objects:
        mesh_file = f"object_{obj.instance_id:03d}.ply"
        hulls_file = f"object_{obj.instance_id:03d}_hulls.ply"
        save_mesh_ply(obj.mesh, out_dir / mesh_file)
        save_mesh_obj(obj.mesh, (out_dir / mesh_file).with_suffix(".obj"))
        save_mesh_sidecar((out_dir / mesh_file).with_suffix(".frame.json"), obj.mesh.frame_tag)
        save_hulls_ply(obj.collision_hulls, out_dir / hulls_file)
        entries.append({
            "instance_id": obj.instance_id,
            "mesh_file": mesh_file,
            "transform": [float(x) for x in obj.transform.reshape(-1)],
            "hulls_file": hulls_file,
        })
    doc = {"table_height": replica.table_height, "objects": entries}
    path = out_dir / "replica.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_replica(path: Path) -> SceneReplica:
    path = Path(path)
    doc = json.loads(path.read_text())
    objects = []
    for entry in doc["objects"]:
        mesh, _ = load_mesh_ply(path.parent / entry["mesh_file"])
        hulls = load_hulls_ply(path.parent / entry["hulls_file"])
        objects.append(PlacedMesh(
            mesh=mesh,
            instance_id=int(entry["instance_id"]),
            transform=np.array(entry["transform"], dtype=np.float64).reshape(4, 4),
            collision_hulls=hulls,
        ))
    return SceneReplica(objects, float(doc["table_height"]))


# --- labels -------------------------------------------------------------------

def save_labels_jsonl(labels: list[GraspLabel], path: Path) -> None:
    with open(path, "w") as f:
        for label in labels:
            doc = {
                "instance": label.candidate.target_instance,
                "pose": [float(x) for x in label.candidate.pose.reshape(-1)],
                "opening": label.candidate.opening,
                "trials": label.trials,
                "successes": label.successes,
                "mean_success": label.mean_success,
                "positive": label.positive,
            }
            f.write(json.dumps(doc) + "\n")


def load_labels_jsonl(path: Path) -> list[GraspLabel]:
    labels = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        cand = GraspCandidate(
            pose=np.array(doc["pose"], dtype=np.float64).reshape(4, 4),
            target_instance=int(doc["instance"]),
            opening=float(doc["opening"]),
        )
        labels.append(GraspLabel(cand, int(doc["trials"]), int(doc["successes"]),
                                 bool(doc["positive"])))
    return labels


# --- voxel grids ----------------------------------------------------------------

def save_voxel_grid(grid: VoxelLabelGrid, path: Path) -> None:
    """Header + one record per cell (label byte, mean success, 16-float pose)."""
    dim = grid.dimension
    with open(path, "wb") as f:
        f.write(VOXEL_GRID_MAGIC)
        f.write(np.array([dim], dtype="<i4").tobytes())
        f.write(np.array([grid.voxel_size], dtype="<f8").tobytes())
        f.write(grid.origin.astype("<f8").tobytes())
        f.write(np.array([grid.out_of_grid], dtype="<i4").tobytes())
        rec = np.zeros(dim ** 3, dtype=[("label", "<u1"), ("mean_success", "<f4"),
                                        ("pose", "<f4", (16,))])
        for (i, j, k), (pose, ms, _) in grid.positive_cells.items():
            flat = (i * dim + j) * dim + k
            rec["label"][flat] = 1
            rec["mean_success"][flat] = ms
            rec["pose"][flat] = pose.reshape(-1).astype(np.float32)
        f.write(rec.tobytes())


def load_voxel_grid(path: Path) -> VoxelLabelGrid:
    with open(path, "rb") as f:
        if f.read(4) != VOXEL_GRID_MAGIC:
            raise ValueError("bad voxel grid magic")
        dim = int(np.frombuffer(f.read(4), dtype="<i4")[0])
        voxel_size = float(np.frombuffer(f.read(8), dtype="<f8")[0])
        origin = np.frombuffer(f.read(24), dtype="<f8").copy()
        out_of_grid = int(np.frombuffer(f.read(4), dtype="<i4")[0])
        rec = np.frombuffer(f.read(), dtype=[("label", "<u1"), ("mean_success", "<f4"),
                                             ("pose", "<f4", (16,))])
    grid = VoxelLabelGrid(origin=origin, dimension=dim, voxel_size=voxel_size,
                          out_of_grid=out_of_grid)
    for flat in np.nonzero(rec["label"])[0]:
        i, rem = divmod(int(flat), dim * dim)
        j, k = divmod(rem, dim)
        grid.positive_cells[(i, j, k)] = (
            rec["pose"][flat].reshape(4, 4).astype(np.float64),
            float(rec["mean_success"][flat]),
            -1,
        )
    return grid


def save_voxel_grid_json(grid: VoxelLabelGrid, path: Path) -> None:
    doc = {
        "dimension": grid.dimension,
        "voxel_size": grid.voxel_size,
        "origin": [float(x) for x in grid.origin],
        "out_of_grid": grid.out_of_grid,
        "positive_count": grid.positive_count,
        "negative_count": grid.negative_count,
        "positive_cells": [
            {"ijk": list(key), "mean_success": ms, "pose": [float(x) for x in pose.reshape(-1)]}
            for key, (pose, ms, _) in sorted(grid.positive_cells.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
