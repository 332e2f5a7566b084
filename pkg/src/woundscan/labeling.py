"""Label transfer from 2D masks to mesh vertices and region boundary extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyRegionError, InputError, WholeSurfaceLabeledError
from .mesh import TriangleMesh, edge_face_incidence, face_components
from .rgbd import PointCloud

ROI_LABEL = 1


@dataclass(frozen=True)
class BoundaryLoop:
    """Closed polyline; the edge from the last vertex back to the first is implicit."""

    vertices: np.ndarray
    vertex_ids: np.ndarray | None = None

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        if len(V) < 3:
            raise InputError("a boundary loop needs at least 3 vertices")
        if (np.linalg.norm(V - np.roll(V, -1, axis=0), axis=1) == 0).any():
            raise InputError("consecutive loop vertices must be distinct")
        object.__setattr__(self, "vertices", V)

    def __len__(self) -> int:
        return len(self.vertices)

    def polygon_length(self) -> float:
        return float(np.linalg.norm(self.vertices - np.roll(self.vertices, -1, axis=0), axis=1).sum())

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def to_json(self) -> list:
        return [[float(c) for c in p] for p in self.vertices]


# ---------------------------------------------------------------------------
# KNN label transfer


def _majority(labels: np.ndarray) -> int:
    vals, counts = np.unique(labels, return_counts=True)
    winners = vals[counts == counts.max()]
    return ROI_LABEL if ROI_LABEL in winners else int(winners.max())


def _tie_aware_vote(labels: np.ndarray, dists: np.ndarray, k: int) -> int:
    """Vote over k neighbours when several are tied at the k-th distance.

    Tied candidates are admitted region label first, then by descending
    label, so the result does not depend on reference point order.
    """
    dk = dists[k - 1]
    sure = labels[dists < dk]
    tied = labels[dists == dk]
    tied = tied[np.lexsort((-tied, tied != ROI_LABEL))]
    return _majority(np.concatenate([sure, tied[: k - len(sure)]]))


def knn_labels(reference: np.ndarray, labels: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Majority label of the k nearest reference points for each query."""
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    if len(ref) == 0:
        raise InputError("reference set is empty")
    labels = np.asarray(labels, dtype=np.int64)
    k = min(k, len(ref))
    tree = cKDTree(ref)
    m = min(len(ref), k + 1)
    d, j = tree.query(queries, k=m)
    d = d.reshape(len(queries), m)
    lab = labels[j.reshape(len(queries), m)]

    ids = np.unique(labels)
    votes = np.stack([(lab[:, :k] == i).sum(axis=1) for i in ids], axis=1)
    winners = votes == votes.max(axis=1, keepdims=True)
    # largest winning id, overridden by the region label when it ties
    out = ids[len(ids) - 1 - np.argmax(winners[:, ::-1], axis=1)]
    if ROI_LABEL in ids:
        out = np.where(winners[:, np.searchsorted(ids, ROI_LABEL)], ROI_LABEL, out)

    tied = d[:, k - 1] == d[:, m - 1] if m > k else np.zeros(len(queries), dtype=bool)
    for row in np.nonzero(tied)[0]:
        radius = d[row, k - 1] * (1 + 1e-9) + 1e-12
        near = np.asarray(tree.query_ball_point(queries[row], radius), dtype=np.int64)
        dd = np.linalg.norm(ref[near] - queries[row], axis=1)
        order = np.argsort(dd, kind="stable")
        out[row] = _tie_aware_vote(labels[near][order], dd[order], k)
    return out


def knn_label_transfer(mesh: TriangleMesh, labeled_clouds: Sequence[PointCloud], k: int = 9) -> TriangleMesh:
    """Give every mesh vertex the majority label of its k nearest labeled points."""
    if k < 1:
        raise InputError("k must be positive")
    clouds = list(labeled_clouds)
    for c in clouds:
        if c.labels is None:
            raise InputError("every reference cloud must carry labels")
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise InputError("reference set is empty")
    ref = np.concatenate([c.points for c in clouds])
    lab = np.concatenate([c.labels for c in clouds])
    return mesh.with_labels(knn_labels(ref, lab, mesh.vertices, k))


# ---------------------------------------------------------------------------
# region and boundary


def region_faces(mesh: TriangleMesh, label: int = ROI_LABEL, largest_only: bool = True) -> np.ndarray:
    """Indices of faces whose three vertices carry ``label``.

    With ``largest_only`` only the largest edge-connected component is
    kept (ties go to the component containing the lowest face index).
    """
    if mesh.vertex_labels is None:
        raise InputError("mesh has no vertex labels")
    lab = mesh.vertex_labels[mesh.faces]
    idx = np.nonzero(np.all(lab == label, axis=1))[0]
    if idx.size == 0:
        raise EmptyRegionError(f"no face is fully labeled {label}")
    if not largest_only:
        return idx
    comp = face_components(mesh.faces[idx])
    sizes = np.bincount(comp)
    return idx[comp == np.argmax(sizes)]


def _chain_loops(directed: np.ndarray) -> list:
    """Chain directed open edges into closed vertex-index loops."""
    out_edges: dict = {}
    for e, (a, _b) in enumerate(directed):
        out_edges.setdefault(int(a), []).append(e)
    used = np.zeros(len(directed), dtype=bool)
    loops = []
    for start in range(len(directed)):
        if used[start]:
            continue
        loop = []
        e = start
        while not used[e]:
            used[e] = True
            a, b = directed[e]
            loop.append(int(a))
            candidates = [c for c in out_edges.get(int(b), []) if not used[c]]
            if not candidates:
                break
            e = min(candidates)
        if len(loop) >= 3:
            loops.append(np.array(loop, dtype=np.int64))
    return loops


def boundary_loops(mesh: TriangleMesh, faces_idx: np.ndarray) -> list:
    """All loops of open edges (used by exactly one selected face)."""
    F = mesh.faces[faces_idx]
    edges, face_id, edge_idx, counts = edge_face_incidence(F)
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    open_slots = counts[edge_idx] == 1
    return _chain_loops(directed[open_slots])


def _loop_length(V: np.ndarray) -> float:
    return float(np.linalg.norm(V - np.roll(V, -1, axis=0), axis=1).sum())


def _splice(main: np.ndarray, other: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Join ``other`` into ``main`` through their closest vertex pair."""
    A = verts[main]
    B = verts[other]
    d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    rotated = np.roll(other, -j)
    return np.concatenate([main[: i + 1], rotated, [other[j]], main[i:]])


def extract_region_boundary(
    mesh: TriangleMesh,
    label: int = ROI_LABEL,
    merge_dist: float = 10.0,
) -> BoundaryLoop:
    """Single closed boundary loop of the largest region labeled ``label``.

    The longest loop is kept; other loops whose centroid lies within
    ``merge_dist`` of it are spliced in at their closest vertex pair.
    """
    faces_idx = region_faces(mesh, label)
    loops = boundary_loops(mesh, faces_idx)
    if not loops:
        raise WholeSurfaceLabeledError("labeled region is closed and has no open edges")
    V = mesh.vertices
    lengths = [_loop_length(V[l]) for l in loops]
    order = np.argsort(lengths, kind="stable")[::-1]
    main = loops[order[0]]
    for idx in order[1:]:
        other = loops[idx]
        gap = np.linalg.norm(V[main] - V[other].mean(axis=0), axis=1).min()
        if gap <= merge_dist:
            main = _splice(main, other, V)
    # drop accidental repeats of consecutive vertices
    keep = np.r_[True, main[1:] != main[:-1]]
    main = main[keep]
    if main[0] == main[-1]:
        main = main[:-1]
    return BoundaryLoop(V[main], main)


# ---------------------------------------------------------------------------
# Savitzky-Golay smoothing


def savgol_coefficients(window: int, order: int) -> np.ndarray:
    """Centred smoothing kernel of the Savitzky-Golay filter.

    Row 0 of the pseudo-inverse of the Vandermonde matrix evaluates the
    local least-squares polynomial at the window centre.
    """
    if window % 2 == 0 or window < 1:
        raise InputError("window must be a positive odd integer")
    if order >= window:
        raise InputError("order must be smaller than the window")
    half = window // 2
    x = np.arange(-half, half + 1, dtype=float)
    A = np.vander(x, order + 1, increasing=True)
    return np.linalg.pinv(A)[0]


def savitzky_golay_smooth(loop: BoundaryLoop, window: int = 9, order: int = 2) -> BoundaryLoop:
    """Circular Savitzky-Golay smoothing of each coordinate channel."""
    n = len(loop)
    if window >= n:
        raise InputError(f"window {window} must be smaller than the loop length {n}")
    c = savgol_coefficients(window, order)
    half = window // 2
    idx = (np.arange(n)[:, None] + np.arange(-half, half + 1)[None, :]) % n
    smoothed = np.einsum("w,nwk->nk", c, loop.vertices[idx])
    return BoundaryLoop(smoothed, loop.vertex_ids)
