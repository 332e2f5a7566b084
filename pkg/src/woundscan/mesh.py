"""Triangle mesh container and small topology helpers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InputError


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_labels: Optional[np.ndarray] = None
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        F = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if F.size and (F.min() < 0 or F.max() >= len(V)):
            raise InputError("face index out of range")
        if F.size and ((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])).any():
            raise InputError("face repeats a vertex")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)
        if self.vertex_labels is not None:
            lab = np.asarray(self.vertex_labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(V):
                raise InputError("vertex_labels length mismatch")
            object.__setattr__(self, "vertex_labels", lab)
        if self.vertex_normals is not None:
            nrm = np.asarray(self.vertex_normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(V):
                raise InputError("vertex_normals length mismatch")
            object.__setattr__(self, "vertex_normals", nrm)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_cross(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cr = self.face_cross()
        n = np.linalg.norm(cr, axis=1, keepdims=True)
        return cr / np.where(n > 0, n, 1.0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def with_labels(self, labels) -> "TriangleMesh":
        return replace(self, vertex_labels=labels)

    def transformed(self, T) -> "TriangleMesh":
        normals = None if self.vertex_normals is None else T.apply_vectors(self.vertex_normals)
        return replace(self, vertices=T.apply(self.vertices), vertex_normals=normals)

    def submesh(self, face_index) -> "TriangleMesh":
        """Faces selected by ``face_index`` with unused vertices dropped."""
        F = self.faces[face_index]
        used, inverse = np.unique(F.reshape(-1), return_inverse=True)
        lab = None if self.vertex_labels is None else self.vertex_labels[used]
        nrm = None if self.vertex_normals is None else self.vertex_normals[used]
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3), lab, nrm)

    def directed_edges(self) -> np.ndarray:
        F = self.faces
        return np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        E = np.unique(np.sort(self.directed_edges(), axis=1), axis=0)
        return int(len(used) - len(E) + len(self.faces))


def edge_face_incidence(faces: np.ndarray):
    """Undirected edges and, per edge, how many faces use it.

    Returns ``(edges (E, 2) sorted per row, face_of_edge_slot (3F,),
    edge_index_of_slot (3F,), counts (E,))``.
    """
    F = np.asarray(faces)
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    face_id = np.tile(np.arange(len(F)), 3)
    und = np.sort(directed, axis=1)
    edges, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    return edges, face_id, inverse.reshape(-1), counts


def face_components(faces: np.ndarray) -> np.ndarray:
    """Connected-component id per face (faces connected through shared edges)."""
    F = np.asarray(faces)
    if len(F) == 0:
        return np.zeros(0, dtype=np.int64)
    _, face_id, edge_idx, _ = edge_face_incidence(F)
    # connect each face to its edges in a bipartite graph
    n_f = len(F)
    n_e = edge_idx.max() + 1
    rows = face_id
    cols = n_f + edge_idx
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_f + n_e, n_f + n_e))
    _, comp = connected_components(graph, directed=False)
    return comp[:n_f]


def orientation_consistent(faces: np.ndarray) -> bool:
    """Every edge shared by two faces is traversed once in each direction."""
    F = np.asarray(faces)
    directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    uniq, counts = np.unique(directed, axis=0, return_counts=True)
    if (counts > 1).any():
        return False
    und, und_counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
    return bool((und_counts <= 2).all())
