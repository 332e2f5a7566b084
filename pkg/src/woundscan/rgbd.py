"""Frames, the pinhole camera model, depth preprocessing and back-projection.

All lengths are millimetres. Depth images hold unsigned 16-bit integers in
sensor units; ``depth_scale`` converts units to millimetres and a stored
value of zero means "no measurement".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import BehindCameraError, InputError
from .transforms import RigidTransform

DEFAULT_Z_RANGE = (300.0, 800.0)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of an image resampled by ``factor`` (0.5 halves it).

        Pixel centres sit at integer coordinates, hence the half-pixel
        shift on the principal point.
        """
        width = max(1, int(self.width * factor))
        height = max(1, int(self.height * factor))
        cx = min((self.cx + 0.5) * factor - 0.5, width - 1e-9)
        cy = min((self.cy + 0.5) * factor - 0.5, height - 1e-9)
        return CameraIntrinsics(self.fx * factor, self.fy * factor, max(cx, 0.0), max(cy, 0.0), width, height)

    def to_json(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CameraIntrinsics":
        try:
            return cls(
                float(payload["fx"]),
                float(payload["fy"]),
                float(payload["cx"]),
                float(payload["cy"]),
                int(payload["width"]),
                int(payload["height"]),
            )
        except KeyError as exc:
            raise InputError(f"intrinsics missing key {exc}") from None


@dataclass(frozen=True)
class MarkerCorners:
    """One detected fiducial: its id and four ordered corner pixels."""

    marker_id: int
    corners: np.ndarray  # (4, 2) as (x, y)

    def __post_init__(self):
        c = np.array(self.corners, dtype=float).reshape(4, 2)
        c.flags.writeable = False
        object.__setattr__(self, "corners", c)


@dataclass(frozen=True)
class RgbdFrame:
    """A registered colour/depth pair with optional mask and marker corners.

    ``color`` is (H, W, 3) uint8, ``depth`` (H, W) uint16 and ``mask``
    (H, W) with values in {0, 1}.
    """

    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    mask: Optional[np.ndarray] = None
    marker_corners: tuple = ()
    timestamp_index: int = 0

    def __post_init__(self):
        shape = self.intrinsics.shape
        depth = np.asarray(self.depth)
        if depth.shape != shape:
            raise InputError(f"depth shape {depth.shape} does not match intrinsics {shape}")
        if depth.dtype != np.uint16:
            if depth.size and (depth.min() < 0 or depth.max() > 65535):
                raise InputError("depth values outside the 16-bit range")
            depth = depth.astype(np.uint16)
        color = np.asarray(self.color)
        if color.shape != shape + (3,):
            raise InputError(f"color shape {color.shape} does not match depth {shape}")
        color = color.astype(np.uint8, copy=False)
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != shape:
                raise InputError(f"mask shape {mask.shape} does not match depth {shape}")
            if not np.isin(mask, (0, 1)).all():
                raise InputError("mask values must be 0 or 1")
            mask = mask.astype(np.uint8)
        markers = tuple(
            m if isinstance(m, MarkerCorners) else MarkerCorners(*m) for m in self.marker_corners
        )
        h, w = shape
        for m in markers:
            c = m.corners
            if (c[:, 0] < 0).any() or (c[:, 0] > w - 1).any() or (c[:, 1] < 0).any() or (c[:, 1] > h - 1).any():
                raise InputError(f"marker {m.marker_id} has corners outside the image")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "marker_corners", markers)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.shape

    def gray(self) -> np.ndarray:
        """Luma in [0, 1]."""
        c = self.color.astype(float) / 255.0
        return c @ np.array([0.299, 0.587, 0.114])

    def depth_mm(self, depth_scale: float = 1.0) -> np.ndarray:
        return self.depth.astype(float) * depth_scale

    def markers_by_id(self) -> dict:
        return {m.marker_id: m.corners for m in self.marker_corners}


@dataclass(frozen=True)
class PointCloud:
    """Points in millimetres with optional parallel attributes.

    ``source_pixel`` rows are ``(frame_index, x, y)``.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    source_pixel: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name, dtype, width in (
            ("colors", np.uint8, 3),
            ("normals", float, 3),
            ("labels", np.int64, None),
            ("source_pixel", np.int64, 3),
        ):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.asarray(value)
            if name == "colors" and arr.dtype.kind == "f":
                arr = np.clip(np.rint(arr), 0, 255)
            arr = arr.astype(dtype, copy=False)
            arr = arr.reshape(-1) if width is None else arr.reshape(-1, width)
            if len(arr) != n:
                raise InputError(f"{name} has {len(arr)} rows, expected {n}")
            object.__setattr__(self, name, arr)
        if self.normals is not None and n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise InputError("normals must have unit length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def subset(self, index) -> "PointCloud":
        def pick(a):
            return None if a is None else a[index]

        return PointCloud(
            self.points[index],
            pick(self.colors),
            pick(self.normals),
            pick(self.labels),
            pick(self.source_pixel),
        )

    def transformed(self, T: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else T.apply_vectors(self.normals)
        if normals is not None and len(normals):
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return replace(self, points=T.apply(self.points), normals=normals)

    def with_normals(self, normals) -> "PointCloud":
        return replace(self, normals=normals)

    def with_labels(self, labels) -> "PointCloud":
        return replace(self, labels=labels)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))

        def cat(name):
            parts = [getattr(c, name) for c in clouds]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return PointCloud(
            np.concatenate([c.points for c in clouds]),
            cat("colors"),
            cat("normals"),
            cat("labels"),
            cat("source_pixel"),
        )


def back_project(
    frame: RgbdFrame,
    depth_scale: float = 1.0,
    z_range: tuple[float, float] = DEFAULT_Z_RANGE,
) -> PointCloud:
    """Lift every valid pixel to a camera-space point, ``Z K^-1 [x y 1]^T``.

    Points come out in row-major pixel order; zero depth and depths
    outside ``z_range`` (closed interval, mm) are skipped.
    """
    if z_range[0] < 0:
        raise InputError("z_range minimum must be non-negative")
    K = frame.intrinsics
    z = frame.depth_mm(depth_scale)
    valid = (frame.depth > 0) & (z >= z_range[0]) & (z <= z_range[1])
    ys, xs = np.nonzero(valid)
    Z = z[ys, xs]
    X = Z * (xs - K.cx) / K.fx
    Y = Z * (ys - K.cy) / K.fy
    labels = None if frame.mask is None else frame.mask[ys, xs].astype(np.int64)
    src = np.column_stack([np.full(len(xs), frame.timestamp_index), xs, ys])
    return PointCloud(
        np.column_stack([X, Y, Z]),
        colors=frame.color[ys, xs],
        labels=labels,
        source_pixel=src,
    )


_EDGE_TOL = 1e-9


def project(point, intrinsics: CameraIntrinsics):
    """Pinhole projection of one camera-space point.

    Returns ``(x, y, Z)`` for points that land inside the image and
    ``None`` when the continuous pixel coordinates fall outside
    ``[0, width) x [0, height)``.
    """
    X, Y, Z = (float(v) for v in point)
    if Z <= 0:
        raise BehindCameraError(f"point has non-positive depth {Z}")
    x = intrinsics.fx * X / Z + intrinsics.cx
    y = intrinsics.fy * Y / Z + intrinsics.cy
    # back-projected column 0 can come back as -4e-16
    if -_EDGE_TOL < x < 0:
        x = 0.0
    if -_EDGE_TOL < y < 0:
        y = 0.0
    if not (0 <= x < intrinsics.width and 0 <= y < intrinsics.height):
        return None
    return (x, y, Z)


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics):
    """Vectorised projection: returns (x, y, Z, in_frame) arrays.

    Points with Z <= 0 are flagged out of frame rather than raising.
    """
    P = np.asarray(points, dtype=float)
    Z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intrinsics.fx * P[:, 0] / Z + intrinsics.cx
        y = intrinsics.fy * P[:, 1] / Z + intrinsics.cy
    x = np.where((x < 0) & (x > -_EDGE_TOL), 0.0, x)
    y = np.where((y < 0) & (y > -_EDGE_TOL), 0.0, y)
    inside = (Z > 0) & (x >= 0) & (x < intrinsics.width) & (y >= 0) & (y < intrinsics.height)
    return x, y, Z, inside


def fill_depth_holes(depth: np.ndarray, window: int = 5, min_valid: int = 3) -> np.ndarray:
    """Median-based spatial smoothing and hole filling.

    Nonzero pixels become the median of the nonzero values in their
    window; zero pixels are filled the same way when at least
    ``min_valid`` neighbours are nonzero.
    """
    if window < 3 or window % 2 == 0:
        raise InputError("window must be odd and at least 3")
    depth = np.asarray(depth)
    r = window // 2
    padded = np.pad(depth.astype(float), r, mode="constant")
    win = sliding_window_view(padded, (window, window)).reshape(depth.shape + (-1,))
    win = np.where(win > 0, win, np.nan)
    count = np.sum(~np.isnan(win), axis=-1)
    with warnings.catch_warnings():
        # all-NaN windows are expected and handled via ``count``
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(win, axis=-1)
    med = np.floor(med + 0.5)
    out = depth.copy()
    holes = depth == 0
    fill = holes & (count >= max(min_valid, 1))
    smooth = ~holes
    out[fill] = med[fill]
    out[smooth] = med[smooth]
    return out.astype(depth.dtype)


def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals over k-nearest neighbourhoods, oriented toward ``viewpoint``."""
    if k < 3:
        raise InputError("k must be at least 3")
    n = len(cloud)
    if n < k + 1:
        raise InputError(f"need at least {k + 1} points for k={k}, got {n}")
    pts = cloud.points
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, pts - np.asarray(viewpoint, dtype=float)) > 0
    normals[flip] *= -1.0
    return cloud.with_normals(normals)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Average points (and colours, normals) per cubic voxel.

    Labels take the per-voxel majority with ties going to the larger
    label id. Output voxels are ordered lexicographically by grid key,
    which makes the result independent of input order up to rounding.
    """
    if cloud.is_empty:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)

    def mean(values):
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    points = mean(cloud.points)
    colors = None if cloud.colors is None else np.rint(mean(cloud.colors.astype(float)))
    normals = None
    if cloud.normals is not None:
        normals = mean(cloud.normals)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 1e-12, normals / np.maximum(norms, 1e-12), [0.0, 0.0, 1.0])
    labels = None
    if cloud.labels is not None:
        ids = np.unique(cloud.labels)
        votes = np.zeros((m, len(ids)), dtype=np.int64)
        np.add.at(votes, (inverse, np.searchsorted(ids, cloud.labels)), 1)
        best = votes.shape[1] - 1 - np.argmax(votes[:, ::-1], axis=1)
        labels = ids[best]
    return PointCloud(points, colors, normals, labels)
