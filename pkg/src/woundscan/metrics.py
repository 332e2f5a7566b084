"""Reconstruction accuracy: mesh sampling, cropping and symmetric distance metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .mesh import TriangleMesh
from .obb import OrientedBox
from .registration import icp_point_to_point
from .rgbd import PointCloud
from .transforms import RigidTransform

__all__ = [
    "OrientedBox",
    "ReconstructionMetrics",
    "crop_to_region",
    "distance_metrics",
    "evaluate_reconstruction",
    "nearest_neighbors",
    "sample_mesh_uniform",
]


@dataclass(frozen=True)
class ReconstructionMetrics:
    ad_mm: float
    hd_mm: float
    hd90_mm: float
    nc: Optional[float]
    n_points_eval: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table_row(self) -> str:
        nc = "-" if self.nc is None else f"{self.nc:.3f}"
        return f"AD {self.ad_mm:.3f} | HD {self.hd_mm:.3f} | HD90 {self.hd90_mm:.3f} | NC {nc} | n {self.n_points_eval}"


def sample_mesh_uniform(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted random samples on the mesh with face normals attached."""
    if n < 1:
        raise InputError("n must be at least 1")
    if mesh.n_faces == 0:
        raise InputError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise InputError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(mesh.n_faces, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    F = mesh.faces[face]
    a, b, c = (mesh.vertices[F[:, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = mesh.face_normals()[face]
    good = np.linalg.norm(normals, axis=1) > 0
    return PointCloud(pts[good], normals=normals[good])


def crop_to_region(cloud: PointCloud, box: OrientedBox) -> PointCloud:
    """Points inside the closed box, attributes preserved."""
    return cloud.subset(np.nonzero(box.contains(cloud.points))[0])


def _pair_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((p - q) ** 2, axis=-1))


def nearest_neighbors(query: np.ndarray, reference: np.ndarray, tree: cKDTree | None = None):
    """Nearest reference point for each query, matching an exhaustive search.

    The kd-tree proposes candidates; distances are then recomputed with the
    same expression an exhaustive search would use and the minimum taken,
    with ties going to the lowest reference index. Rows whose candidate
    list may miss a tie fall back to a radius query.
    """
    Q = np.asarray(query, dtype=float).reshape(-1, 3)
    R = np.asarray(reference, dtype=float).reshape(-1, 3)
    tree = cKDTree(R) if tree is None else tree
    k = min(4, len(R))
    _, j = tree.query(Q, k=k)
    j = j.reshape(len(Q), k)
    d = _pair_distance(Q[:, None, :], R[j])
    # sort candidates by index so argmin breaks ties toward the lowest index
    order = np.argsort(j, axis=1)
    j = np.take_along_axis(j, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    best = np.argmin(d, axis=1)
    dist = d[np.arange(len(Q)), best]
    idx = j[np.arange(len(Q)), best]
    if k < len(R):
        unsure = np.nonzero(d.max(axis=1) <= dist * (1 + 1e-9) + 1e-12)[0]
        for row in unsure:
            cand = np.sort(tree.query_ball_point(Q[row], dist[row] * (1 + 1e-9) + 1e-12))
            dc = _pair_distance(Q[row], R[cand])
            m = int(np.argmin(dc))
            dist[row], idx[row] = dc[m], cand[m]
    return dist, idx


def _nearest_rank(sorted_d: np.ndarray, q: float) -> float:
    return float(sorted_d[max(math.ceil(q * len(sorted_d)) - 1, 0)])


def distance_metrics(pred: PointCloud, gt: PointCloud) -> ReconstructionMetrics:
    """Symmetric AD / HD / HD90 and normal consistency between two clouds."""
    if pred.is_empty or gt.is_empty:
        raise InputError("distance metrics need two nonempty clouds")
    d_pg, j_pg = nearest_neighbors(pred.points, gt.points)
    d_gp, j_gp = nearest_neighbors(gt.points, pred.points)
    s_pg, s_gp = np.sort(d_pg), np.sort(d_gp)
    ad = 0.5 * (float(np.mean(d_pg)) + float(np.mean(d_gp)))
    hd = max(float(s_pg[-1]), float(s_gp[-1]))
    hd90 = max(_nearest_rank(s_pg, 0.9), _nearest_rank(s_gp, 0.9))
    nc = None
    if pred.normals is not None and gt.normals is not None:
        c_pg = np.abs(np.sum(pred.normals * gt.normals[j_pg], axis=1))
        c_gp = np.abs(np.sum(gt.normals * pred.normals[j_gp], axis=1))
        nc = float(np.clip(0.5 * (c_pg.mean() + c_gp.mean()), 0.0, 1.0))
    return ReconstructionMetrics(ad, hd, hd90, nc, len(pred) + len(gt))


def evaluate_reconstruction(
    pred,
    gt,
    init: RigidTransform | None = None,
    crop: OrientedBox | None = None,
    n_samples: int = 100_000,
    max_corr_dist: float = 5.0,
    seed: int = 0,
    icp_points: int = 20_000,
) -> ReconstructionMetrics:
    """Align ``pred`` to ``gt`` by ICP from ``init``, crop both, then compare.

    Meshes are turned into clouds with :func:`sample_mesh_uniform`. ICP
    runs on a random subset of at most ``icp_points`` predicted points.
    """
    if isinstance(pred, TriangleMesh):
        pred = sample_mesh_uniform(pred, n_samples, seed)
    if isinstance(gt, TriangleMesh):
        gt = sample_mesh_uniform(gt, n_samples, seed + 1)
    init = RigidTransform.identity() if init is None else init
    src = pred
    if len(pred) > icp_points:
        pick = np.random.default_rng(seed + 2).choice(len(pred), icp_points, replace=False)
        src = pred.subset(np.sort(pick))
    T, _ = icp_point_to_point(src, gt, init, max_corr_dist=max_corr_dist)
    aligned = pred.transformed(T)
    if crop is not None:
        aligned = crop_to_region(aligned, crop)
        gt = crop_to_region(gt, crop)
    return distance_metrics(aligned, gt)
