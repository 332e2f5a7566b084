"""Alpha-shape triangulation (baseline mesher)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import EmptyMeshError, InputError
from .mesh import TriangleMesh
from .rgbd import PointCloud


def tetra_circumradius(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Circumradius of each tetrahedron (``inf`` for flat ones)."""
    a = points[simplices[:, 0]]
    B = points[simplices[:, 1:]] - a[:, None, :]  # (T, 3, 3) rows b-a, c-a, d-a
    rhs = 0.5 * np.sum(B * B, axis=2)
    det = np.linalg.det(B)
    scale = np.max(np.abs(B), axis=(1, 2)) ** 3
    ok = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
    center = np.full((len(simplices), 3), np.inf)
    if ok.any():
        center[ok] = np.linalg.solve(B[ok], rhs[ok][..., None])[..., 0]
    return np.where(ok, np.linalg.norm(center, axis=1), np.inf)


def alpha_shape_mesh(cloud: PointCloud | np.ndarray, alpha: float = 5.0) -> TriangleMesh:
    """Boundary of the union of Delaunay tetrahedra with circumradius below ``alpha``.

    Triangles are oriented so their normals point away from the tetrahedron
    they bound.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if alpha <= 0:
        raise InputError("alpha must be positive")
    if len(pts) < 4:
        raise InputError("need at least 4 points")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[2] <= 1e-12 * sv[0]:
        raise InputError("points are coplanar; no tetrahedra exist")
    try:
        # joggled input: exactly coplanar patches (noise-free planes) make the
        # default options superquadratic; QJ needs a fifth point
        tri = Delaunay(pts, qhull_options="QJ" if len(pts) > 4 else None)
    except QhullError as exc:
        raise InputError(f"Delaunay tetrahedralisation failed (coplanar input?): {exc}") from None
    simplices = tri.simplices
    keep = tetra_circumradius(pts, simplices) < alpha
    if not keep.any():
        raise EmptyMeshError(f"no tetrahedron has circumradius below alpha={alpha}")
    tets = simplices[keep]

    # the four faces of each tet, each listed with the opposite vertex
    face_ids = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    faces = tets[:, face_ids].reshape(-1, 3)
    opposite = tets[:, [0, 1, 2, 3]].reshape(-1)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inverse.reshape(-1)] == 1
    faces = faces[boundary]
    opposite = opposite[boundary]

    a, b, c = (pts[faces[:, i]] for i in range(3))
    normal = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", normal, pts[opposite] - a) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]

    used, inv = np.unique(faces.reshape(-1), return_inverse=True)
    return TriangleMesh(pts[used], inv.reshape(-1, 3))
