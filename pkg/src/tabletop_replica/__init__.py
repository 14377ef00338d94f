"""Digital-replica reconstruction of tabletop scenes from posed depth images,
with automatic grasp-label generation on the replica."""

__version__ = "0.1.0"

from .camera import CameraIntrinsics, DepthObservation, RigidPose, backproject, render_depth
from .cloud import (NormalizationTransform, ObjectCloud, compute_normalization, denormalize,
                    fuse, normalize, remove_statistical_outliers)
from .errors import (DegenerateCloud, EmptyField, NoCandidates, NoObjects,
                     PipelineError, PlacementExhausted, TooFewPoints)
from .field import FittedFieldParams, OccupancyField, fit_field
from .grasp import (GraspCandidate, GraspJitter, GraspLabel, GripperModel, VoxelLabelGrid,
                    evaluate_grasp, filter_labels, generate_labels, rasterize_labels,
                    sample_grasps)
from .metrics import ReconstructionReport, bbox_iou, chamfer_distance, evaluate_replica
from .mise import MiseConfig, TriangleMesh, extract_mesh, marching_cubes
from .noise import DepthNoiseModel, inject_depth_noise
from .replica import (GroundTruthScene, PlacedMesh, SceneReplica, build_replica,
                      generate_scene, reconstruct_object, simplify_collision)
from .shapes import ShapeSpec, random_catalog

__all__ = [name for name in dir() if not name.startswith("_")]
