"""Oriented bounding boxes: minimal-volume search over convex-hull face normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import InputError


@dataclass(frozen=True)
class OrientedBox:
    """Box with unit ``axes`` (rows), full edge lengths ``extents`` and ``center``."""

    center: np.ndarray
    axes: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        A = np.asarray(self.axes, dtype=float).reshape(3, 3)
        e = np.asarray(self.extents, dtype=float).reshape(3)
        if not np.allclose(A @ A.T, np.eye(3), atol=1e-6):
            raise InputError("box axes must be orthonormal")
        if (e < 0).any():
            raise InputError("box extents must be non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", A)
        object.__setattr__(self, "extents", e)

    @classmethod
    def from_bounds(cls, lower, upper) -> "OrientedBox":
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        if (hi < lo).any():
            raise InputError("upper bound below lower bound")
        return cls(0.5 * (lo + hi), np.eye(3), hi - lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float).reshape(-1, 3) - self.center) @ self.axes.T

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Membership in the closed box."""
        return np.all(np.abs(self.local(points)) <= 0.5 * self.extents + tol, axis=1)

    def corners(self) -> np.ndarray:
        s = np.array([[i, j, k] for i in (-0.5, 0.5) for j in (-0.5, 0.5) for k in (-0.5, 0.5)])
        return self.center + (s * self.extents) @ self.axes

    def sorted_extents(self) -> tuple:
        h, w, d = np.sort(self.extents)[::-1]
        return float(h), float(w), float(d)

    def to_json(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "axes": [[float(v) for v in row] for row in self.axes],
            "extents": [float(v) for v in self.extents],
        }

    @classmethod
    def from_json(cls, data: dict) -> "OrientedBox":
        return cls(data["center"], data["axes"], data["extents"])


def _box_from_axes(points: np.ndarray, axes: np.ndarray) -> OrientedBox:
    loc = points @ axes.T
    lo, hi = loc.min(axis=0), loc.max(axis=0)
    return OrientedBox(0.5 * (lo + hi) @ axes, axes, hi - lo)


def _right_handed(axes: np.ndarray) -> np.ndarray:
    axes = np.array(axes, dtype=float)
    axes[2] = np.cross(axes[0], axes[1])
    return axes


def pca_box(points: np.ndarray) -> OrientedBox:
    """Bounding box aligned with the principal axes of the points."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise InputError("need at least one point")
    _, Vt = _principal_axes(P - P.mean(axis=0))
    return _box_from_axes(P, _right_handed(Vt))


def _plane_basis(n: np.ndarray) -> np.ndarray:
    """Rows (u, w, n) of an orthonormal frame with the given third axis."""
    n = n / np.linalg.norm(n)
    helper = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return np.array([u, np.cross(n, u), n])


def _principal_axes(centred: np.ndarray):
    """Singular values and right singular vectors (rows) of a centred point set."""
    d = centred.shape[1]
    if len(centred) < d:
        # zero rows change neither singular values nor vectors
        centred = np.vstack([centred, np.zeros((d - len(centred), d))])
    _, s, Vt = np.linalg.svd(centred, full_matrices=False)
    return s, Vt


def min_area_rectangle(points2d: np.ndarray):
    """Minimal-area enclosing rectangle by rotating calipers.

    Returns ``(area, direction)`` where ``direction`` is a unit 2D vector
    along one rectangle edge. One of the rectangle's edges is collinear
    with a convex-hull edge, so only hull edge directions are tried; the
    supporting vertices for each edge are found by binary search over the
    monotone sequence of edge angles.
    """
    P = np.asarray(points2d, dtype=float)
    try:
        hull = P[ConvexHull(P).vertices]
    except (QhullError, ValueError):
        # collinear or tiny input: the principal direction is exact
        centred = P - P.mean(axis=0)
        _, Vt = _principal_axes(centred)
        span = np.ptp(centred @ Vt.T, axis=0)
        return float(span[0] * span[1]), Vt[0]
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.linalg.norm(edges, axis=1)
    keep = lengths > 0
    hull, edges = hull[keep], edges[keep] / lengths[keep, None]
    m = len(hull)
    # counter-clockwise hull: edge angles increase through one full turn
    theta = np.arctan2(edges[:, 1], edges[:, 0])
    theta = theta[0] + np.mod(theta - theta[0], 2 * np.pi)

    def support(edge_angle):
        # vertex maximising the dot product with the outward normal of an
        # edge whose direction is ``edge_angle``
        a = theta[0] + np.mod(edge_angle - theta[0], 2 * np.pi)
        return (np.searchsorted(theta, a, side="right")) % m

    perp = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    e_max = support(theta + np.pi / 2)
    e_min = support(theta - np.pi / 2)
    p_max = support(theta + np.pi)
    along = np.einsum("ij,ij->i", hull[e_max] - hull[e_min], edges)
    across = np.einsum("ij,ij->i", hull[p_max] - hull, perp)
    areas = along * across
    best = int(np.argmin(areas))
    return float(areas[best]), edges[best]


def _planar_box(P: np.ndarray, frame: np.ndarray) -> OrientedBox:
    """Box whose third axis is ``frame[2]``; in-plane axes by rotating calipers."""
    uv = P @ frame[:2].T
    _, d = min_area_rectangle(uv)
    e0 = d[0] * frame[0] + d[1] * frame[1]
    e1 = np.cross(frame[2], e0)
    return _box_from_axes(P, np.array([e0, e1, frame[2]]))


def _silhouette_vertices(hull: ConvexHull, n: np.ndarray) -> np.ndarray:
    """Hull vertices that can project onto the outline of the hull seen along n.

    These are the vertices of faces parallel to n and of faces whose
    neighbour lies on the other side of the contour.
    """
    s = hull.equations[:, :3] @ n
    front = s > 0
    flagged = (np.abs(s) <= 1e-9) | (front[:, None] != front[hull.neighbors]).any(axis=1)
    return np.unique(hull.simplices[flagged])


def _candidates_by_bound(H, normals, face_area, candidates, best_volume, n_anchors=1024):
    """Candidate indices in increasing order of a volume lower bound.

    A box flush with direction n has volume at least height(n) * shadow(n),
    where height is the extent of the hull along n and shadow its projected
    area. Both are Lipschitz in n, so exact values at a few
    anchor directions bound all candidates cheaply; exact heights are then
    computed only for candidates that survive the initial ``best_volume``.
    Yields ``(index, bound)`` in increasing bound order.
    """
    step = max(1, len(candidates) // n_anchors)
    anchors = candidates[::step]
    total = face_area.sum()
    radius = np.linalg.norm(H, axis=1).max()

    shadow_a = 0.5 * face_area @ np.abs(normals @ anchors.T)
    height_a = np.ptp(H @ anchors.T, axis=0)
    nearest = np.argmax(candidates @ anchors.T, axis=1)
    gap = np.linalg.norm(candidates - anchors[nearest], axis=1)
    shadow_lb = np.maximum(shadow_a[nearest] - 0.5 * total * gap, 0.0)
    height_lb = np.maximum(height_a[nearest] - 2.0 * radius * gap, 0.0)
    alive = np.nonzero(height_lb * shadow_lb * (1.0 - 1e-9) < best_volume)[0]

    height = np.empty(len(alive))
    for start in range(0, len(alive), 1024):
        chunk = alive[start : start + 1024]
        height[start : start + 1024] = np.ptp(H @ candidates[chunk].T, axis=0)
    bound = height * shadow_lb[alive]
    for j in np.argsort(bound, kind="stable"):
        yield alive[j], bound[j]


def minimal_volume_box(points: np.ndarray) -> OrientedBox:
    """Smallest box among orientations set by convex-hull face normals.

    For each hull face the box is flush with that face and the in-plane
    orientation is the minimal-area rectangle of the projected hull. The
    principal-axis box is included as a candidate, so the result is never
    larger than it. Coplanar and collinear inputs are handled in the plane.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise InputError("need at least one point")
    if len(P) == 1:
        return OrientedBox(P[0], np.eye(3), np.zeros(3))
    centre = P.mean(axis=0)
    Q = P - centre
    s, Vt = _principal_axes(Q)
    frame = _right_handed(Vt)
    if s[0] == 0:
        return OrientedBox(P[0], np.eye(3), np.zeros(3))
    if s[2] <= 1e-9 * s[0]:
        # coplanar (or collinear): third axis is the plane normal
        box = _planar_box(Q, frame)
        return OrientedBox(box.center + centre, box.axes, box.extents)
    best = _box_from_axes(Q, frame)
    try:
        hull = ConvexHull(Q)
    except QhullError:
        return OrientedBox(best.center + centre, best.axes, best.extents)
    H = Q[hull.vertices]
    normals = hull.equations[:, :3]
    tri = Q[hull.simplices]
    face_area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    # n and -n give the same box
    flip = np.sign(normals[np.arange(len(normals)), np.argmax(np.abs(normals), axis=1)])
    candidates = np.unique(np.round(normals * flip[:, None], 12), axis=0)
    candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)

    for i, bound in _candidates_by_bound(H, normals, face_area, candidates, best.volume):
        if bound * (1.0 - 1e-9) >= best.volume:
            break
        n = candidates[i]
        frame = _plane_basis(n)
        rim = Q[_silhouette_vertices(hull, n)]
        _, d = min_area_rectangle(rim @ frame[:2].T)
        e0 = d[0] * frame[0] + d[1] * frame[1]
        axes = np.array([e0, np.cross(n, e0), n])
        # the outline fixes the in-plane extents; the height needs every vertex
        flat = np.ptp(rim @ axes[:2].T, axis=0)
        along = H @ n
        volume = flat[0] * flat[1] * (along.max() - along.min())
        if volume < best.volume:
            best = _box_from_axes(H, axes)
    # re-fit extents on the full point set (hull vertices bound them already)
    best = _box_from_axes(Q, best.axes)
    return OrientedBox(best.center + centre, best.axes, best.extents)
