"""Subcommand front-end wiring the pipeline stages into file-to-file runs.

Every run writes a manifest.json under --out with the resolved parameters, so
reproducing a run is re-invoking with the same values. Diagnostics go to
stderr; files are the only machine-readable output. Exit codes: 0 success,
1 validation error, 2 pipeline failure (with partial outputs removed).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .camera import CameraIntrinsics, render_depth, ring_cameras
from .errors import PipelineError
from .field import FittedFieldParams
from .grasp import (GraspJitter, GripperModel, generate_labels, prepare_scene_geometry,
                    rasterize_labels)
from .metrics import evaluate_replica
from .mise import MiseConfig
from .noise import inject_depth_noise, load_noise_profile
from .replica import build_replica, default_field_builder, generate_scene
from .seeding import stream_rng
from .shapes import random_catalog


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


class _Run:
    """Tracks created files so a failed run can remove partial outputs."""

    def __init__(self, out: Path, subcommand: str, params: dict):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.params = params
        self.created: list[Path] = []
        self.start = time.monotonic()

    def track(self, paths) -> None:
        if isinstance(paths, (str, Path)):
            paths = [paths]
        self.created.extend(Path(p) for p in paths)

    def cleanup(self) -> None:
        for p in self.created:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass

    def write_manifest(self, inputs: list[str], outputs: list[str]) -> None:
        doc = {
            "tool_version": __version__,
            "subcommand": self.subcommand,
            "parameters": self.params,
            "inputs": inputs,
            "outputs": outputs,
            "wall_time_s": round(time.monotonic() - self.start, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON file supplying flag defaults")


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--cam-radius", type=float, default=0.60)
    p.add_argument("--cam-height", type=float, default=0.75)
    p.add_argument("--im-width", type=int, default=200)
    p.add_argument("--im-height", type=int, default=150)
    p.add_argument("--focal", type=float, default=140.0)


def _add_reconstruct_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mise-initial", type=int, default=32)
    p.add_argument("--mise-final", type=int, default=128)
    p.add_argument("--outlier-k", type=int, default=20)
    p.add_argument("--outlier-std", type=float, default=2.0)
    p.add_argument("--no-outlier-removal", action="store_true")
    p.add_argument("--no-close-bottom", action="store_true")
    p.add_argument("--no-carving", action="store_true",
                   help="disable free-space carving from the depth views")
    p.add_argument("--fit-neighbors", type=int, default=12)
    p.add_argument("--fit-sharpness", type=float, default=200.0)


def _add_label_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--candidates", type=int, default=64, help="candidates per object")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--jitter-trans", type=float, default=0.003)
    p.add_argument("--jitter-rot", type=float, default=np.radians(2.0))
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--gripper", default=None, help="gripper JSON (defaults to generic jaw)")


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-dim", type=int, default=40)
    p.add_argument("--voxel-size", type=float, default=0.0075)


def build_parser() -> _Parser:
    parser = _Parser(prog="tabletop-replica")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-scene", help="generate a ground-truth scene JSON")
    _add_common(p)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--bounds", type=float, default=0.55, help="square placement area side, m")
    p.add_argument("--catalog-size", type=int, default=4, help="instances per category")

    p = sub.add_parser("render", help="render posed depth+segmentation views")
    _add_common(p)
    p.add_argument("--scene", required=True)
    _add_camera_flags(p)

    p = sub.add_parser("noise", help="corrupt rendered observations")
    _add_common(p)
    p.add_argument("--views", required=True, help="directory of observation files")
    p.add_argument("--noise-profile", default="kinect-default")

    p = sub.add_parser("reconstruct", help="observations to replica meshes")
    _add_common(p)
    p.add_argument("--views", required=True)
    _add_reconstruct_flags(p)

    p = sub.add_parser("label", help="grasp labels for every replica object")
    _add_common(p)
    p.add_argument("--replica", required=True)
    _add_label_flags(p)

    p = sub.add_parser("rasterize", help="labels to per-object voxel grids")
    _add_common(p)
    p.add_argument("--replica", required=True)
    p.add_argument("--labels", required=True)
    _add_grid_flags(p)

    p = sub.add_parser("eval", help="reconstruction metrics vs ground truth")
    _add_common(p)
    p.add_argument("--replica", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--samples", type=int, default=10_000)

    p = sub.add_parser("pipeline", help="scene, render, noise, reconstruct, label, rasterize, eval")
    _add_common(p)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--bounds", type=float, default=0.55)
    p.add_argument("--catalog-size", type=int, default=4)
    _add_camera_flags(p)
    p.add_argument("--noise-profile", default="kinect-default")
    _add_reconstruct_flags(p)
    _add_label_flags(p)
    _add_grid_flags(p)

    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    # Pre-scan for --config so file values become defaults, flags override.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {cfg_path}: {exc}")
        args = parser.parse_args(argv)
        sub = _subparser(parser, args.subcommand)
        known = {a.dest for a in sub._actions}
        unknown = {k for k in cfg if k.replace("-", "_") not in known}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        return parser.parse_args(argv)
    return parser.parse_args(argv)


def _subparser(parser: _Parser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _intrinsics(args) -> CameraIntrinsics:
    return CameraIntrinsics(fx=args.focal, fy=args.focal,
                            cx=args.im_width / 2.0, cy=args.im_height / 2.0,
                            width=args.im_width, height=args.im_height)


def _gripper(args) -> GripperModel:
    if args.gripper:
        return GripperModel(**json.loads(Path(args.gripper).read_text()))
    return GripperModel()


def _require_files(parser: _Parser, *paths) -> None:
    for p in paths:
        if not Path(p).exists():
            parser.error(f"input not found: {p}")


# --- stage implementations ------------------------------------------------------

def _do_gen_scene(args, run: _Run) -> None:
    catalog = random_catalog(stream_rng(args.seed, "scene", 0), args.catalog_size)
    scene = generate_scene(catalog, args.objects, (args.bounds, args.bounds), args.seed)
    path = run.out / "scene.json"
    io.save_scene_json(scene, path)
    run.track(path)
    _log(f"gen-scene: {len(scene.objects)} objects -> {path}")


def _do_render(args, run: _Run, scene_path: Path, out_dir: Path) -> list[Path]:
    scene = io.load_scene_json(scene_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, (intr, pose) in enumerate(ring_cameras(args.cameras, args.cam_radius,
                                                  args.cam_height, intrinsics=_intrinsics(args))):
        obs = render_depth(scene, intr, pose)
        stem = out_dir / f"view{i:03d}"
        run.track(io.save_observation(obs, stem))
        stems.append(stem)
        _log(f"render: view {i} -> {stem}")
    return stems


def _do_noise(args, run: _Run, view_dir: Path, out_dir: Path) -> list[Path]:
    model = load_noise_profile(args.noise_profile)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, stem in enumerate(io.find_observations(view_dir)):
        obs = io.load_observation(stem)
        noisy = inject_depth_noise(obs, model, args.seed, stream_index=i)
        out_stem = out_dir / stem.name
        run.track(io.save_observation(noisy, out_stem))
        stems.append(out_stem)
    _log(f"noise: {len(stems)} views ({args.noise_profile}) -> {out_dir}")
    return stems


def _do_reconstruct(args, run: _Run, view_dir: Path, out_dir: Path) -> Path:
    observations = [io.load_observation(s) for s in io.find_observations(view_dir)]
    if not observations:
        raise PipelineError(f"no observations under {view_dir}")
    builder = default_field_builder(FittedFieldParams(args.fit_neighbors, args.fit_sharpness))
    replica = build_replica(
        observations,
        field_builder=builder,
        mise_cfg=MiseConfig(args.mise_initial, args.mise_final),
        outlier_k=args.outlier_k,
        outlier_std=args.outlier_std,
        outlier_removal=not args.no_outlier_removal,
        close_bottom=not args.no_close_bottom,
        carve_free_space=not args.no_carving,
        threads=args.threads,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = io.save_replica(replica, out_dir)
    run.track(sorted(out_dir.iterdir()))
    _log(f"reconstruct: {len(replica.objects)} objects -> {path}")
    return path


def _do_label(args, run: _Run, replica_path: Path, out_path: Path) -> Path:
    replica = io.load_replica(replica_path)
    gripper = _gripper(args)
    jitter = GraspJitter(args.jitter_trans, args.jitter_rot)
    geometry = prepare_scene_geometry(replica, gripper)
    labels = []
    for iid in replica.instance_ids():
        obj_labels = generate_labels(replica, iid, gripper, args.candidates, args.trials,
                                     jitter, args.threshold, args.seed, args.threads,
                                     geometry=geometry)
        labels.extend(obj_labels)
        pos = sum(l.positive for l in obj_labels)
        _log(f"label: instance {iid}: {pos}/{len(obj_labels)} positive")
    io.save_labels_jsonl(labels, out_path)
    run.track(out_path)
    return out_path


def _do_rasterize(args, run: _Run, replica_path: Path, labels_path: Path, out_dir: Path) -> None:
    replica = io.load_replica(replica_path)
    labels = io.load_labels_jsonl(labels_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    for obj in replica.objects:
        mine = [l for l in labels if l.candidate.target_instance == obj.instance_id]
        lo, hi = obj.bbox()
        grid = rasterize_labels(mine, (lo + hi) / 2, args.grid_dim, args.voxel_size)
        bin_path = out_dir / f"grid_{obj.instance_id:03d}.bin"
        io.save_voxel_grid(grid, bin_path)
        io.save_voxel_grid_json(grid, bin_path.with_suffix(".json"))
        run.track([bin_path, bin_path.with_suffix(".json")])
        _log(f"rasterize: instance {obj.instance_id}: {grid.positive_count} positive, "
             f"{grid.out_of_grid} out of grid")


def _do_eval(args, run: _Run, replica_path: Path, truth_path: Path, out_dir: Path) -> None:
    replica = io.load_replica(replica_path)
    truth = io.load_scene_json(truth_path)
    report = evaluate_replica(replica, truth, getattr(args, "samples", 10_000), args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    txt_path = out_dir / "report.txt"
    txt_path.write_text(report.to_table() + "\n")
    run.track([json_path, txt_path])
    _log(f"eval: recall {report.object_recall:.3f} -> {json_path}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("subcommand",)}
    run = _Run(Path(args.out), args.subcommand, params)

    try:
        if args.subcommand == "gen-scene":
            _do_gen_scene(args, run)
            run.write_manifest([], ["scene.json"])
        elif args.subcommand == "render":
            _require_files(parser, args.scene)
            _do_render(args, run, Path(args.scene), run.out)
            run.write_manifest([args.scene], ["view*"])
        elif args.subcommand == "noise":
            _require_files(parser, args.views)
            _do_noise(args, run, Path(args.views), run.out)
            run.write_manifest([args.views], ["view*"])
        elif args.subcommand == "reconstruct":
            _require_files(parser, args.views)
            _do_reconstruct(args, run, Path(args.views), run.out)
            run.write_manifest([args.views], ["replica.json", "object_*"])
        elif args.subcommand == "label":
            _require_files(parser, args.replica)
            _do_label(args, run, Path(args.replica), run.out / "labels.jsonl")
            run.write_manifest([args.replica], ["labels.jsonl"])
        elif args.subcommand == "rasterize":
            _require_files(parser, args.replica, args.labels)
            _do_rasterize(args, run, Path(args.replica), Path(args.labels), run.out)
            run.write_manifest([args.replica, args.labels], ["grid_*"])
        elif args.subcommand == "eval":
            _require_files(parser, args.replica, args.truth)
            _do_eval(args, run, Path(args.replica), Path(args.truth), run.out)
            run.write_manifest([args.replica, args.truth], ["report.json", "report.txt"])
        elif args.subcommand == "pipeline":
            _do_gen_scene(args, run)
            scene_path = run.out / "scene.json"
            _do_render(args, run, scene_path, run.out / "views")
            _do_noise(args, run, run.out / "views", run.out / "noisy")
            replica_path = _do_reconstruct(args, run, run.out / "noisy", run.out / "replica")
            labels_path = _do_label(args, run, replica_path, run.out / "labels.jsonl")
            _do_rasterize(args, run, replica_path, labels_path, run.out / "grids")
            _do_eval(args, run, replica_path, scene_path, run.out)
            run.write_manifest([], ["scene.json", "views", "noisy", "replica",
                                    "labels.jsonl", "grids", "report.json"])
    except PipelineError as exc:
        _log(f"pipeline failure: {exc}")
        run.cleanup()
        return 2
    except (OSError, ValueError) as exc:
        _log(f"error: {exc}")
        run.cleanup()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
