"""Perimeter, surface area and box dimensions of a labeled mesh region."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InputError
from .labeling import ROI_LABEL, BoundaryLoop, extract_region_boundary, region_faces, savitzky_golay_smooth
from .mesh import TriangleMesh
from .obb import minimal_volume_box

METRIC_KEYS = ("perimeter_mm", "surface_area_mm2", "height_mm", "width_mm", "depth_mm")

_GL_ORDER = 8
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)


@dataclass(frozen=True)
class MeasurementReport:
    perimeter_mm: float
    surface_area_mm2: float
    height_mm: float
    width_mm: float
    depth_mm: float
    loop_vertex_count: int = 0
    region_face_count: int = 0

    def __post_init__(self):
        for key in METRIC_KEYS:
            if not getattr(self, key) >= 0:
                raise InputError(f"{key} must be non-negative")
        if not self.height_mm >= self.width_mm >= self.depth_mm:
            raise InputError("box dimensions must be ordered height >= width >= depth")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in METRIC_KEYS:
            d[key] = float(d[key])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class MetricSpread:
    mean: float
    max_pairwise_diff: float
    mean_pairwise_diff: float

    @property
    def relative_mean_diff(self) -> float:
        return self.mean_pairwise_diff / self.mean if self.mean else 0.0


@dataclass(frozen=True)
class RepeatabilityStats:
    n_runs: int
    metrics: dict

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "metrics": {k: asdict(v) for k, v in self.metrics.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def repeatability(reports: Sequence[MeasurementReport]) -> RepeatabilityStats:
    """Mean, max and mean absolute pairwise difference of each metric."""
    reports = list(reports)
    if len(reports) < 2:
        raise InputError("repeatability needs at least two reports")
    out = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        diffs = np.array([abs(a - b) for a, b in itertools.combinations(vals, 2)])
        out[key] = MetricSpread(float(vals.mean()), float(diffs.max()), float(diffs.mean()))
    return RepeatabilityStats(len(reports), out)


# ---------------------------------------------------------------------------
# perimeter


def closed_spline(loop: BoundaryLoop) -> CubicSpline:
    """Periodic interpolating cubic through the loop, chord-length parameterised."""
    P = loop.vertices
    closed = np.vstack([P, P[:1]])
    t = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(closed, axis=0), axis=1))])
    return CubicSpline(t, closed, bc_type="periodic")


def _span_lengths(deriv: CubicSpline, a: np.ndarray, b: np.ndarray, pieces: np.ndarray) -> np.ndarray:
    """Arc length of each span [a, b] split into ``pieces`` equal Gauss-Legendre panels."""
    out = np.empty(len(a))
    for count in np.unique(pieces):
        sel = np.nonzero(pieces == count)[0]
        edges = a[sel, None] + (b[sel] - a[sel])[:, None] * np.linspace(0.0, 1.0, count + 1)[None, :]
        lo, hi = edges[:, :-1], edges[:, 1:]
        half = 0.5 * (hi - lo)
        x = (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_NODES
        speed = np.linalg.norm(deriv(x.reshape(-1)), axis=1).reshape(x.shape)
        out[sel] = (half * (speed @ _GL_WEIGHTS)).sum(axis=1)
    return out


def perimeter(loop: BoundaryLoop, samples: int | None = None, rtol: float = 1e-6) -> float:
    """Arc length of the closed cubic spline through the loop vertices.

    Each knot span starts with enough Gauss-Legendre panels to spend
    about ``samples`` speed evaluations in total (default 10 per vertex)
    and is refined by doubling its panel count until the span length
    changes by less than ``rtol`` relative.
    """
    n = len(loop)
    if samples is None:
        samples = 10 * n
    if samples < 10 * n:
        raise InputError(f"samples must be at least 10x the loop vertex count ({10 * n})")
    spline = closed_spline(loop)
    deriv = spline.derivative()
    a, b = spline.x[:-1], spline.x[1:]
    pieces = np.full(n, max(1, int(np.ceil(samples / (n * _GL_ORDER)))))
    lengths = _span_lengths(deriv, a, b, pieces)
    active = np.ones(n, dtype=bool)
    for _ in range(30):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        refined = _span_lengths(deriv, a[idx], b[idx], 2 * pieces[idx])
        done = np.abs(refined - lengths[idx]) <= rtol * np.abs(refined)
        lengths[idx] = refined
        pieces[idx] *= 2
        active[idx[done]] = False
    return float(lengths.sum())


# ---------------------------------------------------------------------------
# area and box


def surface_area(mesh: TriangleMesh, label: int = ROI_LABEL, largest_only: bool = True) -> float:
    """Total area of the labeled region (largest component unless disabled)."""
    faces = region_faces(mesh, label, largest_only=largest_only)
    return float(mesh.submesh(faces).area())


def box_dimensions(points: np.ndarray) -> tuple:
    """Edge lengths of the minimal-volume oriented box, largest first."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 1:
        raise InputError("need at least one point")
    return minimal_volume_box(P).sorted_extents()


def measure_region(
    mesh: TriangleMesh,
    label: int = ROI_LABEL,
    sg_window: int = 9,
    sg_order: int = 2,
    spline_samples: int | None = None,
    merge_dist: float = 10.0,
) -> MeasurementReport:
    """Perimeter, area and box dimensions of the largest region labeled ``label``."""
    loop = extract_region_boundary(mesh, label, merge_dist=merge_dist)
    smooth = savitzky_golay_smooth(loop, sg_window, sg_order)
    samples = None if spline_samples is None else max(spline_samples, 10 * len(smooth))
    faces = region_faces(mesh, label)
    region = mesh.submesh(faces)
    h, w, d = box_dimensions(region.vertices)
    return MeasurementReport(
        perimeter_mm=perimeter(smooth, samples),
        surface_area_mm2=region.area(),
        height_mm=h,
        width_mm=w,
        depth_mm=d,
        loop_vertex_count=len(smooth),
        region_face_count=len(faces),
    )
