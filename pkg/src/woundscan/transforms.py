"""Rigid transforms in SE(3) and the exponential map used by the optimizers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading axes."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def rotation_from_axis_angle(axis_angle) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + np.sin(theta) / theta * K
        + (1.0 - np.cos(theta)) / theta**2 * K @ K
    )


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion ``x -> R x + t`` with ``t`` in millimetres."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InputError("rigid transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise InputError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis_angle, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_from_axis_angle(axis_angle), translation)

    @classmethod
    def exp(cls, xi) -> "RigidTransform":
        """Exponential map of a twist ``xi = (omega, v)``.

        The rotation part comes from Rodrigues' formula and the
        translation from the left Jacobian ``V``, so that
        ``exp(xi)`` is the exact group exponential.
        """
        xi = np.asarray(xi, dtype=float)
        w, v = xi[:3], xi[3:]
        theta = np.linalg.norm(w)
        K = skew(w)
        R = rotation_from_axis_angle(w)
        if theta < 1e-8:
            V = np.eye(3) + 0.5 * K + K @ K / 6.0
        else:
            V = (
                np.eye(3)
                + (1.0 - np.cos(theta)) / theta**2 * K
                + (theta - np.sin(theta)) / theta**3 * K @ K
            )
        return cls(R, V @ v)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        cos = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos)))

    def error_to(self, other: "RigidTransform") -> tuple[float, float]:
        """(rotation error in degrees, translation error in mm)."""
        delta = self.inverse() @ other
        return delta.rotation_angle_deg(), float(
            np.linalg.norm(self.translation - other.translation)
        )

    def to_json(self, frame: int | None = None) -> dict:
        out = {}
        if frame is not None:
            out["frame"] = int(frame)
        out["rotation"] = [float(x) for x in self.rotation.reshape(-1)]
        out["translation_mm"] = [float(x) for x in self.translation]
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "RigidTransform":
        R = orthonormalize(np.asarray(payload["rotation"], dtype=float).reshape(3, 3))
        return cls(R, payload["translation_mm"])


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """Camera-to-world pose for a pinhole camera at ``eye`` looking at ``target``.

    Camera axes follow the image convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), eye)
