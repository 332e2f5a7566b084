"""Command-line interface: ``woundscan {synth,reconstruct,measure,evaluate,repeat}``.

Exit codes: 0 success, 2 dataset/input error, 3 numerical or registration
failure, 4 empty region.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import io
from .config import PipelineConfig
from .errors import (
    DatasetLayoutError,
    EmptyMeshError,
    EmptyRegionError,
    IncreaseSmoothnessError,
    InputError,
    InsufficientOverlapError,
    NoOverlapError,
    RegistrationError,
    WoundScanError,
)
from .mesh import TriangleMesh
from .metrics import evaluate_reconstruction
from .obb import OrientedBox
from .pipeline import measure, reconstruct, repeat_measurements
from .rgbd import PointCloud
from .transforms import RigidTransform

EXIT_OK = 0
EXIT_DATASET = 2
EXIT_NUMERICAL = 3
EXIT_EMPTY_REGION = 4


# ---------------------------------------------------------------------------
# configuration plumbing


_FLAG_ALIASES = {"registration": ["--method"], "lam": ["--lambda"]}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML file overriding the defaults")
    group = parser.add_argument_group("pipeline settings (override the config file)")
    for f in fields(PipelineConfig):
        flags = ["--" + f.name.replace("_", "-")] + _FLAG_ALIASES.get(f.name, [])
        default = f.default
        if isinstance(default, bool):
            group.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            nargs = "+" if f.name == "max_iterations" else len(default)
            group.add_argument(*flags, dest=f.name, type=type(default[0]), nargs=nargs, default=None)
        elif f.name == "crop_box":
            group.add_argument(*flags, dest=f.name, type=Path, default=None, help="JSON file with center/axes/extents")
        elif default is None:
            group.add_argument(*flags, dest=f.name, type=int, default=None)
        else:
            group.add_argument(*flags, dest=f.name, type=type(default), default=None)


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    for f in fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "crop_box":
            value = io.load_json(value)
        changes[f.name] = value
    return config.replace(**changes) if changes else config


def _report(payload: dict, config: PipelineConfig) -> dict:
    return {**payload, "config": config.to_dict()}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import (
        SyntheticScene,
        analytic_measurements,
        arc_poses,
        default_intrinsics,
        region_crop_box,
        render_frame,
        sample_ground_truth,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = SyntheticScene(textured=not args.textureless)
    poses = arc_poses(args.frames, args.max_angle, args.distance)
    frames = [
        render_frame(
            scene,
            P,
            default_intrinsics(),
            depth_noise_sigma=args.noise,
            seed=args.seed + i,
            depth_unit=args.depth_unit,
            timestamp_index=i,
        )
        for i, P in enumerate(poses)
    ]
    io.save_frames(out, frames)
    io.save_poses(out / "poses.json", poses)
    gt = sample_ground_truth(scene, args.gt_samples, seed=args.seed)
    io.write_ply_cloud(out / "ground_truth.ply", gt, binary=True)
    io.dump_json(analytic_measurements(scene).to_dict(), out / "analytic_report.json")
    io.dump_json(region_crop_box(scene).to_json(), out / "crop_box.json")
    io.dump_json({"depth_scale": args.depth_unit}, out / "dataset.json")
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def _dataset_depth_scale(root: Path, config: PipelineConfig) -> PipelineConfig:
    meta = root / "dataset.json"
    if meta.exists() and config.depth_scale == 1.0:
        scale = float(io.load_json(meta).get("depth_scale", 1.0))
        return config.replace(depth_scale=scale)
    return config


def cmd_reconstruct(args) -> int:
    config = resolve_config(args)
    root = Path(args.dataset)
    config = _dataset_depth_scale(root, config)
    frames = io.load_frames(root, args.frames)
    rec = reconstruct(frames, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_ply_cloud(out / "fused.ply", rec.fusion.cloud, binary=True)
    io.write_ply_cloud(out / "labeled_points.ply", rec.labeled_points(), binary=True)
    io.save_poses(out / "poses.json", rec.poses)
    io.write_ply_mesh(out / "mesh.ply", rec.mesh)
    io.write_obj(out / "mesh.obj", rec.mesh)
    io.dump_json(rec.timing, out / "timing.json")
    print(
        f"registration {rec.timing['registration_s']:.2f} s, meshing {rec.timing['meshing_s']:.2f} s, "
        f"{rec.mesh.n_faces} faces"
    )
    return EXIT_OK


def cmd_measure(args) -> int:
    config = resolve_config(args)
    recon = Path(args.recon) if args.recon else None
    mesh_path = Path(args.mesh) if args.mesh else recon / "mesh.ply"
    labels_path = Path(args.labels) if args.labels else recon / "labeled_points.ply"
    mesh = io.read_ply(mesh_path)
    if not isinstance(mesh, TriangleMesh):
        raise DatasetLayoutError(mesh_path, "expected a mesh with faces")
    labeled = io.read_ply(labels_path)
    if not isinstance(labeled, PointCloud) or labeled.labels is None:
        raise DatasetLayoutError(labels_path, "expected a point cloud with a label property")
    report = measure(mesh, labeled, config)
    text = io.dump_json(_report(report.to_dict(), config), args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(
            f"perimeter {report.perimeter_mm:.2f} mm, area {report.surface_area_mm2:.2f} mm2, "
            f"box {report.height_mm:.2f} x {report.width_mm:.2f} x {report.depth_mm:.2f} mm"
        )
    return EXIT_OK


def _load_init(path: Path | None) -> RigidTransform:
    if path is None:
        return RigidTransform.identity()
    return io.load_poses(path)[0]


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    pred = io.read_ply(args.pred)
    gt = io.read_ply(args.gt)
    init = _load_init(args.init)
    crop = config.crop()
    if args.crop is not None:
        crop = OrientedBox.from_json(io.load_json(args.crop))
    metrics = evaluate_reconstruction(
        pred,
        gt,
        init,
        crop,
        n_samples=config.n_samples,
        max_corr_dist=config.icp_max_corr_dist,
        seed=config.seed,
    )
    print(metrics.table_row())
    if args.out is not None:
        io.dump_json(_report(metrics.to_dict(), config), args.out)
    return EXIT_OK


def cmd_repeat(args) -> int:
    config = resolve_config(args)
    root = Path(args.dataset)
    config = _dataset_depth_scale(root, config)
    frames = io.load_frames(root, args.frames)
    result = repeat_measurements(frames, config)
    text = io.dump_json(_report(result.to_dict(), config), args.out)
    if args.out is None:
        sys.stdout.write(text)
    area = result.stats.metrics["surface_area_mm2"]
    print(
        f"{len(result.reports)} runs; area mean {area.mean:.2f} mm2, pairwise diff max {area.max_pairwise_diff:.2f} "
        f"mean {area.mean_pairwise_diff:.2f} ({100 * area.relative_mean_diff:.2f}%)",
        file=sys.stderr if args.out is None else sys.stdout,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="woundscan", description="RGB-D wound reconstruction and measurement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic crater dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.5, help="depth noise sigma in mm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt-samples", type=int, default=1_000_000)
    p.add_argument("--max-angle", type=float, default=30.0)
    p.add_argument("--distance", type=float, default=450.0)
    p.add_argument("--depth-unit", type=float, default=1.0, help="mm per depth unit")
    p.add_argument("--textureless", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="register, fuse and mesh a dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, nargs="+", help="frame numbers to use (default: all)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("measure", help="label a mesh and measure the region")
    p.add_argument("recon", type=Path, nargs="?", help="output directory of 'reconstruct'")
    p.add_argument("--mesh", type=Path)
    p.add_argument("--labels", type=Path, help="labeled point cloud PLY")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--init", type=Path, help="poses JSON; the first entry maps pred into gt")
    p.add_argument("--crop", type=Path, help="crop box JSON (overrides --crop-box)")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repeat", help="measure over several frame subsets")
    p.add_argument("dataset", type=Path)
    p.add_argument("--frames", type=int, nargs="+", help="frame numbers to draw subsets from")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_repeat)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, EmptyRegionError):
        return EXIT_EMPTY_REGION
    if isinstance(exc, (DatasetLayoutError, InputError, FileNotFoundError)):
        return EXIT_DATASET
    if isinstance(
        exc,
        (
            RegistrationError,
            NoOverlapError,
            InsufficientOverlapError,
            IncreaseSmoothnessError,
            EmptyMeshError,
            WoundScanError,
        ),
    ):
        return EXIT_NUMERICAL
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "measure" and args.recon is None and (args.mesh is None or args.labels is None):
        parser.error("measure needs a reconstruction directory or both --mesh and --labels")
    try:
        return args.func(args)
    except (WoundScanError, FileNotFoundError) as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
