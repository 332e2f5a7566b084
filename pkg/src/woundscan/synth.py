"""Analytic wound-phantom scenes and a ray-casting RGB-D renderer.

A scene is a finite square sheet ``z = f(x, y)`` (millimetres, z up) made
of a base plane with spherical-cap craters cut into it. Everything the
pipeline estimates has a closed form here: surface heights and normals,
the labeled region, marker corners and the region's measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyFrameError, InputError, UnsupportedOracleError
from .obb import OrientedBox
from .rgbd import CameraIntrinsics, MarkerCorners, PointCloud, RgbdFrame
from .transforms import RigidTransform, look_at

MARKER_SIDE_MM = 13.0


@dataclass(frozen=True)
class Crater:
    """Spherical-cap depression with rim radius ``radius`` and depth ``depth``."""

    center: tuple = (0.0, 0.0)
    radius: float = 20.0
    depth: float = 5.0

    @property
    def sphere_radius(self) -> float:
        return (self.radius**2 + self.depth**2) / (2.0 * self.depth)

    def height(self, x, y):
        r2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        inside = r2 < self.radius**2
        if self.depth <= 0:
            return np.zeros_like(r2)
        R = self.sphere_radius
        s = np.sqrt(np.maximum(R * R - r2, 0.0))
        return np.where(inside, -(s - (R - self.depth)), 0.0)

    def gradient(self, x, y):
        dx = x - self.center[0]
        dy = y - self.center[1]
        r2 = dx * dx + dy * dy
        inside = r2 < self.radius**2
        if self.depth <= 0:
            z = np.zeros_like(r2)
            return z, z
        R = self.sphere_radius
        s = np.sqrt(np.maximum(R * R - r2, 1e-12))
        return np.where(inside, dx / s, 0.0), np.where(inside, dy / s, 0.0)


@dataclass(frozen=True)
class Marker:
    marker_id: int
    center: tuple
    side: float = MARKER_SIDE_MM

    def corners_xy(self) -> np.ndarray:
        h = self.side / 2.0
        cx, cy = self.center
        return np.array([[cx - h, cy + h], [cx + h, cy + h], [cx + h, cy - h], [cx - h, cy - h]])


@dataclass(frozen=True)
class SyntheticScene:
    half_extent: float = 75.0
    craters: tuple = (Crater(),)
    markers: tuple = (Marker(0, (-45.0, 0.0)), Marker(1, (45.0, 0.0)))
    textured: bool = True
    texture_seed: int = 7
    # craters whose discs form the labeled region
    region_craters: tuple = (0,)

    def __post_init__(self):
        bad = [i for i in self.region_craters if not 0 <= i < len(self.craters)]
        if bad:
            raise InputError(f"region_craters {bad} do not index into the {len(self.craters)} craters")

    def in_domain(self, x, y):
        e = self.half_extent
        return (np.abs(x) <= e) & (np.abs(y) <= e)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.zeros(np.broadcast(x, y).shape)
        for c in self.craters:
            z = z + c.height(x, y)
        return z

    def normal(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for c in self.craters:
            a, b = c.gradient(x, y)
            gx = gx + a
            gy = gy + b
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def min_height(self) -> float:
        return -sum(c.depth for c in self.craters)

    def region_mask(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for i in self.region_craters:
            c = self.craters[i]
            out |= (x - c.center[0]) ** 2 + (y - c.center[1]) ** 2 <= c.radius**2
        return out

    def texture(self, x, y) -> np.ndarray:
        """RGB in [0, 255] at surface coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.textured:
            noise = _value_noise(x, y, self.texture_seed, self.half_extent)
        else:
            noise = np.full(np.broadcast(x, y).shape, 0.5)
        shade = 0.45 + 0.55 * noise
        skin = np.array([225.0, 180.0, 160.0])
        wound = np.array([200.0, 70.0, 70.0])
        inside = self.region_mask(x, y)[..., None]
        rgb = np.where(inside, wound, skin) * shade[..., None]
        for m in self.markers:
            h = m.side / 2.0
            on = (np.abs(x - m.center[0]) <= h) & (np.abs(y - m.center[1]) <= h)
            inner = (np.abs(x - m.center[0]) <= 0.6 * h) & (np.abs(y - m.center[1]) <= 0.6 * h)
            rgb = np.where(on[..., None], 15.0, rgb)
            rgb = np.where(inner[..., None], 240.0, rgb)
        return np.clip(rgb, 0, 255)


def _value_noise(x, y, seed: int, extent: float) -> np.ndarray:
    """Multi-octave lattice value noise in [0, 1]."""
    total = np.zeros(np.broadcast(x, y).shape)
    weight = 0.0
    for octave, (cell, amp) in enumerate(((12.0, 0.4), (6.0, 0.3), (3.0, 0.2), (1.5, 0.1))):
        n = int(math.ceil(2 * extent / cell)) + 3
        grid = np.random.default_rng(seed * 101 + octave).random((n, n))
        gx = (x + extent) / cell
        gy = (y + extent) / cell
        ix = np.clip(np.floor(gx).astype(np.int64), 0, n - 2)
        iy = np.clip(np.floor(gy).astype(np.int64), 0, n - 2)
        fx = np.clip(gx - ix, 0.0, 1.0)
        fy = np.clip(gy - iy, 0.0, 1.0)
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        a = grid[iy, ix] * (1 - sx) + grid[iy, ix + 1] * sx
        b = grid[iy + 1, ix] * (1 - sx) + grid[iy + 1, ix + 1] * sx
        total = total + amp * (a * (1 - sy) + b * sy)
        weight += amp
    total /= weight
    # stretch so the texture spans most of the range
    lo, hi = 0.2, 0.8
    return np.clip((total - lo) / (hi - lo), 0.0, 1.0)


def default_intrinsics() -> CameraIntrinsics:
    """640x480 pinhole with a focal length typical of commodity RGB-D sensors."""
    return CameraIntrinsics(615.0, 615.0, 320.0, 240.0, 640, 480)


def camera_pose(
    tilt_x_deg: float = 0.0,
    tilt_y_deg: float = 0.0,
    distance: float = 450.0,
    target=(0.0, 0.0, 0.0),
) -> RigidTransform:
    """Camera-to-world pose on a sphere around ``target``.

    Zero tilt puts the camera straight above the target looking down.
    """
    a = math.radians(tilt_x_deg)
    b = math.radians(tilt_y_deg)
    direction = np.array([math.sin(b) * math.cos(a), math.sin(a), math.cos(b) * math.cos(a)])
    eye = np.asarray(target, dtype=float) + distance * direction
    return look_at(eye, target, up=(0.0, 1.0, 0.0))


def arc_poses(n: int, max_angle: float = 30.0, distance: float = 450.0) -> list:
    """Poses along a closed sweep covering +-max_angle in both directions.

    The first pose is the fronto-parallel reference.
    """
    poses = []
    for i in range(n):
        s = i / n
        tx = max_angle * math.sin(2 * math.pi * s)
        ty = max_angle * math.sin(4 * math.pi * s + math.pi / 2) if i else 0.0
        if i == 0:
            tx = ty = 0.0
        d = distance + 25.0 * math.sin(2 * math.pi * s)
        poses.append(camera_pose(tx, ty, d))
    return poses


def render_frame(
    scene: SyntheticScene,
    pose: RigidTransform,
    intrinsics: CameraIntrinsics | None = None,
    depth_noise_sigma: float = 0.0,
    seed: int = 0,
    depth_unit: float = 1.0,
    timestamp_index: int = 0,
) -> RgbdFrame:
    """Ray-cast one RGB-D frame of ``scene`` seen from camera pose ``pose``.

    ``pose`` maps camera coordinates to world coordinates. Depth is the
    camera-space Z of the first surface hit, perturbed by Gaussian noise
    and quantised to ``depth_unit`` millimetres.
    """
    K = default_intrinsics() if intrinsics is None else intrinsics
    h, w = K.height, K.width
    ys, xs = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones((h, w))], axis=-1).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T
    origin = pose.translation
    s_hit = _cast_rays(scene, origin, dirs)
    hit = np.isfinite(s_hit)
    if not hit.any():
        raise EmptyFrameError("no pixel sees the surface")

    P = origin + dirs[hit] * s_hit[hit, None]
    Z = s_hit[hit].copy()
    if depth_noise_sigma > 0:
        Z += np.random.default_rng(seed).normal(0.0, depth_noise_sigma, Z.shape)
    q = np.floor(Z / depth_unit + 0.5)
    q = np.where((q >= 1) & (q <= 65535), q, 0)
    depth = np.zeros(h * w, dtype=np.uint16)
    depth[hit] = q.astype(np.uint16)

    color = np.zeros((h * w, 3))
    color[hit] = scene.texture(P[:, 0], P[:, 1])
    mask = np.zeros(h * w, dtype=np.uint8)
    mask[hit] = scene.region_mask(P[:, 0], P[:, 1])
    # quantisation may zero a few pixels; keep colour/mask where depth exists
    valid = depth > 0
    color[~valid] = 0
    mask[~valid] = 0

    markers = []
    inv = pose.inverse()
    for m in scene.markers:
        xy = m.corners_xy()
        world = np.column_stack([xy, scene.height(xy[:, 0], xy[:, 1])])
        cam = inv.apply(world)
        if (cam[:, 2] <= 0).any():
            continue
        px = K.fx * cam[:, 0] / cam[:, 2] + K.cx
        py = K.fy * cam[:, 1] / cam[:, 2] + K.cy
        if (px < 0).any() or (px > w - 1).any() or (py < 0).any() or (py > h - 1).any():
            continue
        markers.append(MarkerCorners(m.marker_id, np.column_stack([px, py])))

    return RgbdFrame(
        color=np.rint(color).reshape(h, w, 3).astype(np.uint8),
        depth=depth.reshape(h, w),
        intrinsics=K,
        mask=mask.reshape(h, w),
        marker_corners=tuple(markers),
        timestamp_index=timestamp_index,
    )


def _cast_rays(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Ray parameter of the first surface hit per ray, ``inf`` for misses.

    The parameter scales ``dirs`` (whose camera-z is 1), so it equals the
    camera-space depth of the hit.
    """
    n = len(dirs)
    out = np.full(n, np.inf)
    oz = origin[2]
    if oz <= 0:
        return out
    dz = dirs[:, 2]
    down = dz < -1e-12
    s_top = np.full(n, np.inf)
    s_top[down] = -oz / dz[down]
    top = origin[:2] + dirs[:, :2] * np.where(down, s_top, 0.0)[:, None]
    in_dom = down & scene.in_domain(top[:, 0], top[:, 1])
    f_top = np.where(in_dom, scene.height(top[:, 0], top[:, 1]), 0.0)
    flat = in_dom & (f_top >= 0.0)
    out[flat] = s_top[flat]

    # rays entering over a crater: march down to the first crossing, then bisect
    deep = np.nonzero(in_dom & (f_top < 0.0))[0]
    if deep.size == 0:
        return out
    zmin = scene.min_height() - 1e-3
    o = origin
    d = dirs[deep]
    s0 = s_top[deep]
    s1 = (zmin - oz) / d[:, 2]
    step_z = 0.05
    m = int(np.ceil((s1 - s0).max() * np.abs(d[:, 2]).max() / step_z)) + 2
    ts = np.linspace(0.0, 1.0, m)
    S = s0[:, None] + (s1 - s0)[:, None] * ts[None, :]
    X = o[0] + d[:, 0, None] * S
    Y = o[1] + d[:, 1, None] * S
    Zr = oz + d[:, 2, None] * S
    g = np.where(scene.in_domain(X, Y), Zr - scene.height(X, Y), np.inf)
    below = g <= 0
    has = below.any(axis=1)
    k = np.argmax(below, axis=1)
    rows = np.nonzero(has)[0]
    k = k[rows]
    lo = S[rows, np.maximum(k - 1, 0)]
    hi = S[rows, k]
    dd = d[rows]

    def height_above(s):
        px = o[0] + dd[:, 0] * s
        py = o[1] + dd[:, 1] * s
        return oz + dd[:, 2] * s - scene.height(px, py)

    # bisection until the interval is below tol in depth
    while True:
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        gm = height_above(mid)
        above = gm > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out[deep[rows]] = 0.5 * (lo + hi)
    return out


def sample_ground_truth(scene: SyntheticScene, n: int, seed: int = 0) -> PointCloud:
    """Uniform samples over the base domain lifted onto the surface, with normals."""
    rng = np.random.default_rng(seed)
    e = scene.half_extent
    xy = rng.uniform(-e, e, size=(int(n), 2))
    z = scene.height(xy[:, 0], xy[:, 1])
    normals = scene.normal(xy[:, 0], xy[:, 1])
    labels = scene.region_mask(xy[:, 0], xy[:, 1]).astype(np.int64)
    return PointCloud(np.column_stack([xy, z]), normals=normals, labels=labels)


def region_crop_box(scene: SyntheticScene, margin: float = 30.0) -> OrientedBox:
    """World-frame box around the labeled crater, ``margin`` mm beyond its rim."""
    c = scene.craters[scene.region_craters[0]]
    half = c.radius + margin
    cx, cy = c.center
    return OrientedBox.from_bounds([cx - half, cy - half, -c.depth - 20.0], [cx + half, cy + half, 20.0])


def analytic_measurements(scene: SyntheticScene):
    """Closed-form measurements of a single spherical-cap crater region."""
    from .measure import MeasurementReport

    if len(scene.region_craters) != 1:
        raise UnsupportedOracleError("oracle supports exactly one region crater")
    c = scene.craters[scene.region_craters[0]]
    others = [o for i, o in enumerate(scene.craters) if i != scene.region_craters[0]]
    for o in others:
        gap = math.hypot(o.center[0] - c.center[0], o.center[1] - c.center[1])
        if gap < o.radius + c.radius:
            raise UnsupportedOracleError("region crater overlaps another crater")
    r, hgt = c.radius, max(c.depth, 0.0)
    perimeter = 2.0 * math.pi * r
    area = 2.0 * math.pi * c.sphere_radius * hgt if hgt > 0 else math.pi * r * r
    dims = sorted((2.0 * r, 2.0 * r, hgt), reverse=True)
    return MeasurementReport(
        perimeter_mm=perimeter,
        surface_area_mm2=area,
        height_mm=dims[0],
        width_mm=dims[1],
        depth_mm=dims[2],
        loop_vertex_count=0,
        region_face_count=0,
    )
