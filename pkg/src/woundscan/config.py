"""Pipeline configuration: defaults, validation and YAML round trip."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import InputError
from .obb import OrientedBox
from .registration import OdometryConfig


@dataclass(frozen=True)
class PipelineConfig:
    # registration
    registration: str = "odometry"
    lam: float = 0.9
    pyramid_levels: int = 3
    max_iterations: tuple = (40, 30, 20)
    convergence_eps: float = 1e-6
    max_depth_diff: float = 30.0
    geometric_unit_mm: float = 20.0
    depth_scale: float = 1.0
    z_min: float = 300.0
    z_max: float = 800.0
    initial_alignment: bool = True
    fill_holes: bool = False
    voxel_size: float = 1.0
    normals_k: int = 16
    # meshing
    mesher: str = "bspline"
    grid: tuple = (40, 40)
    degree: tuple = (3, 3)
    smoothness: float = 1e-2
    fit_iterations: int = 2
    trim_resolution: tuple = (64, 64)
    tessellation: tuple = (640, 640)
    alpha: float = 5.0
    # labeling and measurement
    knn_k: int = 9
    label: int = 1
    merge_dist: float = 10.0
    sg_window: int = 9
    sg_order: int = 2
    spline_samples: Optional[int] = None
    # evaluation
    crop_box: Optional[dict] = None
    n_samples: int = 200_000
    icp_max_corr_dist: float = 5.0
    seed: int = 0
    # repeatability
    repeat_runs: int = 5
    repeat_subset_size: int = 4

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                object.__setattr__(self, f.name, tuple(value))
        self._validate()

    def _validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise InputError(f"invalid config: {msg}")

        need(self.registration in ("odometry", "marker"), "registration must be 'odometry' or 'marker'")
        need(self.mesher in ("bspline", "alpha"), "mesher must be 'bspline' or 'alpha'")
        need(0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]")
        need(self.pyramid_levels >= 1, "pyramid_levels must be >= 1")
        need(len(self.max_iterations) >= 1 and all(int(i) >= 0 for i in self.max_iterations), "max_iterations")
        need(self.convergence_eps > 0, "convergence_eps must be positive")
        need(self.max_depth_diff > 0, "max_depth_diff must be positive")
        need(self.geometric_unit_mm > 0, "geometric_unit_mm must be positive")
        need(self.depth_scale > 0, "depth_scale must be positive")
        need(0 < self.z_min < self.z_max, "need 0 < z_min < z_max")
        need(self.voxel_size >= 0, "voxel_size must be non-negative")
        need(self.normals_k >= 0, "normals_k must be non-negative")
        need(len(self.grid) == 2 and len(self.degree) == 2, "grid and degree are pairs")
        need(all(d >= 1 for d in self.degree), "degree must be >= 1")
        need(all(g >= d + 1 for g, d in zip(self.grid, self.degree)), "grid must exceed degree")
        need(self.smoothness >= 0, "smoothness must be non-negative")
        need(self.fit_iterations >= 0, "fit_iterations must be non-negative")
        need(len(self.trim_resolution) == 2 and min(self.trim_resolution) >= 1, "trim_resolution")
        need(len(self.tessellation) == 2 and min(self.tessellation) >= 2, "tessellation must be >= 2 per side")
        need(self.alpha > 0, "alpha must be positive")
        need(self.knn_k >= 1 and self.knn_k % 2 == 1, "knn_k must be a positive odd integer")
        need(self.merge_dist >= 0, "merge_dist must be non-negative")
        need(self.sg_window >= 1 and self.sg_window % 2 == 1, "sg_window must be odd")
        need(0 <= self.sg_order < self.sg_window, "need 0 <= sg_order < sg_window")
        need(self.spline_samples is None or self.spline_samples >= 1, "spline_samples must be positive")
        need(self.n_samples >= 1, "n_samples must be positive")
        need(self.icp_max_corr_dist > 0, "icp_max_corr_dist must be positive")
        need(self.repeat_runs >= 2, "repeat_runs must be >= 2")
        need(self.repeat_subset_size >= 1, "repeat_subset_size must be >= 1")
        if self.crop_box is not None:
            try:
                OrientedBox.from_json(self.crop_box)
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"invalid config: crop_box: {exc}") from None

    # conversions -----------------------------------------------------------

    def odometry(self) -> OdometryConfig:
        return OdometryConfig(
            lam=self.lam,
            pyramid_levels=self.pyramid_levels,
            max_iterations_per_level=tuple(int(i) for i in self.max_iterations),
            convergence_eps=self.convergence_eps,
            max_depth_diff=self.max_depth_diff,
            depth_scale=self.depth_scale,
            z_range=(self.z_min, self.z_max),
            geometric_unit_mm=self.geometric_unit_mm,
        )

    def crop(self) -> Optional[OrientedBox]:
        return None if self.crop_box is None else OrientedBox.from_json(self.crop_box)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "PipelineConfig":
        return self.from_dict({**self.to_dict(), **changes})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InputError(f"config is not valid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise InputError("config must be a mapping of keys to values")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_yaml(Path(path).read_text())


def config_field_types() -> dict:
    """Field name to default value, used to build command-line flags."""
    return {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
