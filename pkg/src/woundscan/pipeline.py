"""End-to-end orchestration: frames to mesh, mesh to measurements."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .alpha import alpha_shape_mesh
from .bspline import fit_bspline_surface, tessellate
from .config import PipelineConfig
from .errors import InputError
from .labeling import knn_label_transfer
from .measure import MeasurementReport, RepeatabilityStats, measure_region, repeatability
from .mesh import TriangleMesh
from .registration import FusionResult, fuse_frames
from .rgbd import PointCloud, RgbdFrame, fill_depth_holes


@dataclass(frozen=True)
class Reconstruction:
    fusion: FusionResult
    mesh: TriangleMesh
    timing: dict

    @property
    def poses(self) -> list:
        return self.fusion.poses

    def labeled_points(self) -> PointCloud:
        """Per-frame points in the reference camera, with mask labels."""
        labeled = [c for c in self.fusion.clouds if c.labels is not None]
        return PointCloud.concatenate([PointCloud(c.points, labels=c.labels) for c in labeled])


def build_mesh(cloud: PointCloud, config: PipelineConfig) -> TriangleMesh:
    if config.mesher == "alpha":
        return alpha_shape_mesh(cloud, config.alpha)
    surface = fit_bspline_surface(
        cloud,
        grid=tuple(config.grid),
        degree=tuple(config.degree),
        smoothness=config.smoothness,
        iterations=config.fit_iterations,
        trim_resolution=tuple(config.trim_resolution),
    )
    return tessellate(surface, tuple(config.tessellation))


def reconstruct(frames: Sequence[RgbdFrame], config: PipelineConfig = PipelineConfig()) -> Reconstruction:
    """Register frames to the first one, fuse them and mesh the result."""
    frames = list(frames)
    if config.fill_holes:
        frames = [replace(f, depth=fill_depth_holes(f.depth)) for f in frames]
    t0 = time.perf_counter()
    fusion = fuse_frames(
        frames,
        method=config.registration,
        config=config.odometry(),
        voxel_size=config.voxel_size,
        normals_k=config.normals_k,
        initial_alignment=config.initial_alignment,
    )
    t1 = time.perf_counter()
    mesh = build_mesh(fusion.cloud, config)
    t2 = time.perf_counter()
    timing = {"registration_s": t1 - t0, "meshing_s": t2 - t1, "total_s": t2 - t0}
    return Reconstruction(fusion, mesh, timing)


def measure(mesh: TriangleMesh, labeled: Sequence[PointCloud] | PointCloud, config: PipelineConfig = PipelineConfig()) -> MeasurementReport:
    """Transfer labels onto the mesh and measure the labeled region."""
    clouds = [labeled] if isinstance(labeled, PointCloud) else list(labeled)
    labeled_mesh = knn_label_transfer(mesh, clouds, config.knn_k)
    return measure_region(
        labeled_mesh,
        label=config.label,
        sg_window=config.sg_window,
        sg_order=config.sg_order,
        spline_samples=config.spline_samples,
        merge_dist=config.merge_dist,
    )


def choose_subsets(n_frames: int, runs: int, size: int, seed: int = 0) -> list:
    """``runs`` distinct sorted frame subsets of the given size, chosen reproducibly."""
    if size > n_frames:
        raise InputError(f"subset size {size} exceeds the {n_frames} available frames")
    if math.comb(n_frames, size) < runs:
        raise InputError(f"fewer than {runs} distinct subsets of size {size} exist")
    rng = np.random.default_rng(seed)
    chosen: list = []
    while len(chosen) < runs:
        pick = tuple(sorted(int(i) for i in rng.choice(n_frames, size, replace=False)))
        if pick not in chosen:
            chosen.append(pick)
    return chosen


@dataclass(frozen=True)
class RepeatResult:
    subsets: list
    reports: list
    stats: RepeatabilityStats

    def to_dict(self) -> dict:
        return {
            "subsets": [list(s) for s in self.subsets],
            "reports": [r.to_dict() for r in self.reports],
            "repeatability": self.stats.to_dict(),
        }


def repeat_measurements(frames: Sequence[RgbdFrame], config: PipelineConfig = PipelineConfig()) -> RepeatResult:
    """Reconstruct and measure over several frame subsets."""
    frames = list(frames)
    subsets = choose_subsets(len(frames), config.repeat_runs, config.repeat_subset_size, config.seed)
    reports = []
    for subset in subsets:
        rec = reconstruct([frames[i] for i in subset], config)
        reports.append(measure(rec.mesh, rec.labeled_points(), config))
    return RepeatResult(subsets, reports, repeatability(reports))
