"""Frame-to-frame registration and multi-frame fusion.

Three estimators live here:

* closed-form rigid fit to 3D correspondences (centroids + SVD),
* point-to-point ICP built on that fit,
* dense hybrid RGB-D odometry minimising
  ``(1 - lam) * sum (I_t(p') - I_s(p))^2 + lam * sum (D_t(p') - Z'(p))^2``
  by Gauss-Newton over twists, coarse to fine.

Odometry samples the target intensity and depth with a cubic-convolution
(Catmull-Rom) kernel. The interpolant is C1 and its derivative at pixel
centres reduces to the central difference, so the analytic Jacobian is the
exact derivative of the sampled residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCorrespondencesError,
    InputError,
    InsufficientLandmarksError,
    InsufficientOverlapError,
    InvalidCornerDepthError,
    NoOverlapError,
    RegistrationError,
    WoundScanError,
)
from .rgbd import (
    DEFAULT_Z_RANGE,
    CameraIntrinsics,
    PointCloud,
    RgbdFrame,
    back_project,
    estimate_normals,
    voxel_downsample,
)
from .transforms import RigidTransform, skew

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# closed-form rigid fit


def rigid_from_correspondences(source, target) -> RigidTransform:
    """Least-squares rigid motion taking ``source[i]`` onto ``target[i]``.

    Raises ``DegenerateCorrespondencesError`` for fewer than three pairs
    or (near) collinear sources, where a rotation about the common line
    is unobservable.
    """
    P = np.asarray(source, dtype=float).reshape(-1, 3)
    Q = np.asarray(target, dtype=float).reshape(-1, 3)
    if P.shape != Q.shape:
        raise InputError("source and target must have the same shape")
    if len(P) < 3:
        raise DegenerateCorrespondencesError(f"need at least 3 pairs, got {len(P)}")
    mu_p = P.mean(axis=0)
    mu_q = Q.mean(axis=0)
    Pc = P - mu_p
    Qc = Q - mu_q
    sv = np.linalg.svd(Pc, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[1] <= 1e-9 * scale or sv[0] == 0:
        raise DegenerateCorrespondencesError("correspondences are collinear or coincident")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, mu_q - R @ mu_p)


# ---------------------------------------------------------------------------
# ICP


def icp_point_to_point(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    max_corr_dist: float = 5.0,
    max_iterations: int = 50,
    rel_fitness_eps: float = 1e-9,
    target_tree: cKDTree | None = None,
    return_history: bool = False,
):
    """Point-to-point ICP. Returns ``(transform, rmse)``.

    Each iteration matches every transformed source point to its nearest
    target point, drops pairs farther than ``max_corr_dist`` and refits.
    A refit is kept only if it lowers the RMSE over the gated pairs, so
    the reported RMSE sequence never increases.
    """
    if source.is_empty or target.is_empty:
        raise InputError("ICP needs two nonempty clouds")
    T = RigidTransform.identity() if init is None else init
    tree = cKDTree(target.points) if target_tree is None else target_tree
    src = source.points
    tgt = target.points

    def match(T):
        moved = T.apply(src)
        d, j = tree.query(moved, distance_upper_bound=max_corr_dist)
        ok = np.isfinite(d)
        return moved, d, j, ok

    moved, d, j, ok = match(T)
    if not ok.any():
        raise NoOverlapError(f"no correspondences within {max_corr_dist} mm")
    rmse = float(np.sqrt(np.mean(d[ok] ** 2)))
    history = [rmse]
    for _ in range(max_iterations):
        if ok.sum() < 3:
            break
        try:
            step = rigid_from_correspondences(moved[ok], tgt[j[ok]])
        except DegenerateCorrespondencesError:
            break
        T_new = step @ T
        moved_new, d_new, j_new, ok_new = match(T_new)
        if not ok_new.any():
            break
        rmse_new = float(np.sqrt(np.mean(d_new[ok_new] ** 2)))
        if rmse_new > rmse:
            break
        improvement = rmse - rmse_new
        T, moved, d, j, ok, rmse = T_new, moved_new, d_new, j_new, ok_new, rmse_new
        history.append(rmse)
        if improvement <= rel_fitness_eps * max(rmse, 1e-12):
            break
    if return_history:
        return T, rmse, history
    return T, rmse


# ---------------------------------------------------------------------------
# dense RGB-D odometry


@dataclass(frozen=True)
class OdometryConfig:
    lam: float = 0.9
    pyramid_levels: int = 3
    max_iterations_per_level: tuple = (40, 30, 20)
    convergence_eps: float = 1e-6
    max_depth_diff: float = 30.0
    depth_scale: float = 1.0
    z_range: tuple = DEFAULT_Z_RANGE
    # geometric residuals are divided by this before weighting; roughly the
    # ratio of depth noise (mm) to intensity noise (grey levels in [0, 1])
    geometric_unit_mm: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InputError("lambda must lie in [0, 1]")
        if self.pyramid_levels < 1:
            raise InputError("pyramid_levels must be at least 1")
        iters = self.max_iterations_per_level
        if isinstance(iters, int):
            iters = (iters,)
        object.__setattr__(self, "max_iterations_per_level", tuple(int(i) for i in iters))

    def iterations_at(self, level: int) -> int:
        # level 0 is the finest; the tuple is listed finest first
        iters = self.max_iterations_per_level
        return iters[min(level, len(iters) - 1)]


@dataclass
class PyramidLevel:
    gray: np.ndarray
    depth: np.ndarray  # mm, 0 = invalid
    intrinsics: CameraIntrinsics


def _downsample_gray(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    b = img[:h, :w]
    return 0.25 * (b[0::2, 0::2] + b[1::2, 0::2] + b[0::2, 1::2] + b[1::2, 1::2])


def _downsample_depth(depth: np.ndarray) -> np.ndarray:
    """Median of the valid values in each 2x2 block."""
    h, w = (depth.shape[0] // 2) * 2, (depth.shape[1] // 2) * 2
    b = depth[:h, :w]
    blocks = np.stack([b[0::2, 0::2], b[1::2, 0::2], b[0::2, 1::2], b[1::2, 1::2]], axis=-1)
    blocks = np.where(blocks > 0, blocks, np.nan)
    out = np.zeros(blocks.shape[:2])
    valid = ~np.all(np.isnan(blocks), axis=-1)
    out[valid] = np.nanmedian(blocks[valid], axis=-1)
    return out


def build_pyramid(frame: RgbdFrame, levels: int, depth_scale: float = 1.0, z_range=DEFAULT_Z_RANGE):
    gray = frame.gray()
    depth = frame.depth_mm(depth_scale)
    depth = np.where((depth >= z_range[0]) & (depth <= z_range[1]), depth, 0.0)
    pyr = [PyramidLevel(gray, depth, frame.intrinsics)]
    for _ in range(1, levels):
        prev = pyr[-1]
        if min(prev.gray.shape) < 8:
            break
        pyr.append(
            PyramidLevel(
                _downsample_gray(prev.gray),
                _downsample_depth(prev.depth),
                prev.intrinsics.scaled(0.5),
            )
        )
    return pyr


def _catmull_rom(t: np.ndarray):
    """Weights and derivative weights for taps at offsets -1, 0, 1, 2."""
    t2 = t * t
    t3 = t2 * t
    w = np.stack(
        [
            0.5 * (-t3 + 2 * t2 - t),
            0.5 * (3 * t3 - 5 * t2 + 2),
            0.5 * (-3 * t3 + 4 * t2 + t),
            0.5 * (t3 - t2),
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            0.5 * (-3 * t2 + 4 * t - 1),
            0.5 * (9 * t2 - 10 * t),
            0.5 * (-9 * t2 + 8 * t + 1),
            0.5 * (3 * t2 - 2 * t),
        ],
        axis=-1,
    )
    return w, dw


def sample_cubic(images: Sequence[np.ndarray], u: np.ndarray, v: np.ndarray):
    """Cubic-convolution samples of several same-shape images.

    Returns ``(values, du, dv, inside)``; ``values`` etc. are lists
    parallel to ``images``. Samples whose 4x4 support leaves the image
    are flagged ``inside=False`` (their values are garbage).
    """
    h, w = images[0].shape
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    inside = (iu >= 1) & (iu <= w - 3) & (iv >= 1) & (iv <= h - 3)
    iu = np.where(inside, iu, 1)
    iv = np.where(inside, iv, 1)
    wu, dwu = _catmull_rom(u - iu)
    wv, dwv = _catmull_rom(v - iv)
    offs = np.arange(-1, 3)
    rows = (iv[:, None] + offs)[:, :, None]
    cols = (iu[:, None] + offs)[:, None, :]
    values, dus, dvs = [], [], []
    for img in images:
        patch = img[rows, cols]  # (N, 4 rows, 4 cols)
        along_u = np.einsum("nrc,nc->nr", patch, wu)
        d_along_u = np.einsum("nrc,nc->nr", patch, dwu)
        values.append(np.einsum("nr,nr->n", along_u, wv))
        dus.append(np.einsum("nr,nr->n", d_along_u, wv))
        dvs.append(np.einsum("nr,nr->n", along_u, dwv))
    return values, dus, dvs, inside


def _depth_support_valid(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    iu = np.clip(np.floor(u).astype(np.int64), 1, depth.shape[1] - 3)
    iv = np.clip(np.floor(v).astype(np.int64), 1, depth.shape[0] - 3)
    offs = np.arange(-1, 3)
    patch = depth[(iv[:, None] + offs)[:, :, None], (iu[:, None] + offs)[:, None, :]]
    return np.all(patch > 0, axis=(1, 2))


@dataclass
class SourceSamples:
    points: np.ndarray  # (N, 3) camera-space source points
    intensity: np.ndarray  # (N,)


def source_samples(level: PyramidLevel) -> SourceSamples:
    K = level.intrinsics
    ys, xs = np.nonzero(level.depth > 0)
    Z = level.depth[ys, xs]
    pts = np.column_stack([Z * (xs - K.cx) / K.fx, Z * (ys - K.cy) / K.fy, Z])
    return SourceSamples(pts, level.gray[ys, xs])


def odometry_residuals(
    src: SourceSamples,
    target: PyramidLevel,
    T: RigidTransform,
    max_depth_diff: float,
    with_jacobian: bool = True,
    geometric_unit_mm: float = 1.0,
):
    """Photometric and geometric residuals of the source samples under ``T``.

    Returns ``(r_photo, r_depth, J_photo, J_depth, index)`` where
    ``index`` selects the source samples that produced valid residuals.
    The Jacobians are with respect to a left-multiplied twist
    ``(omega, v)``: ``T <- exp(xi) T``.
    """
    K = target.intrinsics
    X = T.apply(src.points)
    Z = X[:, 2]
    keep = Z > 1e-6
    Zs = np.where(keep, Z, 1.0)
    u = K.fx * X[:, 0] / Zs + K.cx
    v = K.fy * X[:, 1] / Zs + K.cy
    u = np.where(keep, u, -10.0)
    v = np.where(keep, v, -10.0)
    (I_t, D_t), (dI_du, dD_du), (dI_dv, dD_dv), inside = sample_cubic([target.gray, target.depth], u, v)
    ok = keep & inside
    ok[ok] &= _depth_support_valid(target.depth, u[ok], v[ok])
    r_depth = D_t - Z
    ok &= np.abs(r_depth) <= max_depth_diff
    idx = np.nonzero(ok)[0]
    r_photo = (I_t - src.intensity)[idx]
    r_depth = r_depth[idx] / geometric_unit_mm
    if not with_jacobian:
        return r_photo, r_depth, None, None, idx
    Xv = X[idx]
    Zv = Zs[idx]
    # d(u, v)/dX
    du_dX = np.column_stack([K.fx / Zv, np.zeros_like(Zv), -K.fx * Xv[:, 0] / Zv**2])
    dv_dX = np.column_stack([np.zeros_like(Zv), K.fy / Zv, -K.fy * Xv[:, 1] / Zv**2])
    # dX/dxi = [-[X]x, I]
    dX_dxi = np.concatenate([-skew(Xv), np.broadcast_to(np.eye(3), (len(idx), 3, 3))], axis=2)
    gI = dI_du[idx, None] * du_dX + dI_dv[idx, None] * dv_dX
    gD = dD_du[idx, None] * du_dX + dD_dv[idx, None] * dv_dX
    gD[:, 2] -= 1.0
    J_photo = np.einsum("ni,nij->nj", gI, dX_dxi)
    J_depth = np.einsum("ni,nij->nj", gD, dX_dxi) / geometric_unit_mm
    return r_photo, r_depth, J_photo, J_depth, idx


def _energy(r_photo, r_depth, lam) -> float:
    n = len(r_depth)
    if n == 0:
        return np.inf
    return float(((1.0 - lam) * np.dot(r_photo, r_photo) + lam * np.dot(r_depth, r_depth)) / n)


@dataclass(frozen=True)
class OdometryResult:
    transform: RigidTransform
    energy: float
    converged: bool

    def __iter__(self):
        return iter((self.transform, self.energy, self.converged))


def rgbd_odometry(
    source: RgbdFrame,
    target: RgbdFrame,
    config: OdometryConfig = OdometryConfig(),
    init: RigidTransform | None = None,
) -> OdometryResult:
    """Estimate ``T`` mapping source-camera points into the target camera.

    The reported energy is the weighted mean squared residual over the
    valid set at the finest level. Every accepted Gauss-Newton step
    strictly lowers it (step halving, up to 8 times), and the final
    pose is never worse than ``init`` at the finest level.
    """
    if source.shape != target.shape:
        raise InputError("source and target frames differ in size")
    T0 = RigidTransform.identity() if init is None else init
    lam = config.lam
    pyr_s = build_pyramid(source, config.pyramid_levels, config.depth_scale, config.z_range)
    pyr_t = build_pyramid(target, config.pyramid_levels, config.depth_scale, config.z_range)
    levels = min(len(pyr_s), len(pyr_t))
    samples = [source_samples(pyr_s[l]) for l in range(levels)]

    coarsest = levels - 1
    r_p, r_d, _, _, _ = odometry_residuals(samples[coarsest], pyr_t[coarsest], T0, config.max_depth_diff, False, config.geometric_unit_mm)
    if len(r_d) < 6:
        raise InsufficientOverlapError(f"only {len(r_d)} valid residuals at the coarsest level")

    T = T0
    converged = False
    for level in range(coarsest, -1, -1):
        src, tgt = samples[level], pyr_t[level]
        r_p, r_d, J_p, J_d, _ = odometry_residuals(src, tgt, T, config.max_depth_diff, True, config.geometric_unit_mm)
        E = _energy(r_p, r_d, lam)
        converged = False
        for _ in range(config.iterations_at(level)):
            if len(r_d) < 6 or E <= 1e-24:
                converged = True
                break
            H = (1.0 - lam) * J_p.T @ J_p + lam * J_d.T @ J_d
            g = (1.0 - lam) * J_p.T @ r_p + lam * J_d.T @ r_d
            delta = -np.linalg.lstsq(H, g, rcond=1e-12)[0]
            accepted = False
            for _halving in range(9):
                T_try = RigidTransform.exp(delta) @ T
                rp2, rd2, Jp2, Jd2, _ = odometry_residuals(src, tgt, T_try, config.max_depth_diff, True, config.geometric_unit_mm)
                E_try = _energy(rp2, rd2, lam)
                if len(rd2) >= 6 and E_try < E:
                    accepted = True
                    break
                delta = 0.5 * delta
            if not accepted:
                converged = True
                break
            decrease = (E - E_try) / max(E, 1e-300)
            T, E, r_p, r_d, J_p, J_d = T_try, E_try, rp2, rd2, Jp2, Jd2
            if decrease < config.convergence_eps:
                converged = True
                break
        log.debug("odometry level %d: energy %.6g over %d residuals", level, E, len(r_d))

    rp0, rd0, _, _, _ = odometry_residuals(samples[0], pyr_t[0], T0, config.max_depth_diff, False, config.geometric_unit_mm)
    E_init = _energy(rp0, rd0, lam)
    rp1, rd1, _, _, _ = odometry_residuals(samples[0], pyr_t[0], T, config.max_depth_diff, False, config.geometric_unit_mm)
    E_final = _energy(rp1, rd1, lam)
    if E_final > E_init:
        return OdometryResult(T0, E_init, False)
    return OdometryResult(T, E_final, converged)


# ---------------------------------------------------------------------------
# marker corners


def sample_depth_bilinear(depth: np.ndarray, x: float, y: float) -> Optional[float]:
    """Bilinear depth that ignores zero neighbours and renormalises.

    Falls back to the mean of the valid 3x3 neighbourhood; returns
    ``None`` when that is empty too.
    """
    h, w = depth.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total = 0.0
    weight = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            if 0 <= xi < w and 0 <= yi < h and depth[yi, xi] > 0:
                total += wx * wy * float(depth[yi, xi])
                weight += wx * wy
    if weight > 1e-12:
        return total / weight
    xr, yr = int(round(x)), int(round(y))
    patch = depth[max(yr - 1, 0) : yr + 2, max(xr - 1, 0) : xr + 2]
    valid = patch[patch > 0]
    if valid.size == 0:
        return None
    return float(valid.mean())


def lift_marker_corners(frame: RgbdFrame, depth_scale: float = 1.0) -> dict:
    """3D corner positions per marker id, in the frame's camera coordinates."""
    K = frame.intrinsics
    depth = frame.depth_mm(depth_scale)
    out = {}
    for m in frame.marker_corners:
        pts = []
        for x, y in m.corners:
            Z = sample_depth_bilinear(depth, x, y)
            if Z is None:
                raise InvalidCornerDepthError(
                    f"marker {m.marker_id} corner ({x:.1f}, {y:.1f}) has no valid depth nearby"
                )
            pts.append([Z * (x - K.cx) / K.fx, Z * (y - K.cy) / K.fy, Z])
        out[m.marker_id] = np.array(pts)
    return out


def marker_alignment(source: RgbdFrame, target: RgbdFrame, depth_scale: float = 1.0) -> RigidTransform:
    """Rigid transform from source to target camera via shared marker corners."""
    shared = sorted(set(source.markers_by_id()) & set(target.markers_by_id()))
    if len(shared) < 2:
        raise InsufficientLandmarksError(f"frames share {len(shared)} marker(s); need at least 2")
    ps = lift_marker_corners(source, depth_scale)
    qs = lift_marker_corners(target, depth_scale)
    P = np.concatenate([ps[i] for i in shared])
    Q = np.concatenate([qs[i] for i in shared])
    return rigid_from_correspondences(P, Q)


# ---------------------------------------------------------------------------
# coarse initialisation and fusion


def _dominant_normal(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    n = vecs[:, 0]
    # face the camera at the origin
    if np.dot(n, points.mean(axis=0)) > 0:
        n = -n
    return n


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = skew(v)
    return np.eye(3) + K + K @ K / (1.0 + c)


def coarse_alignment(
    source: PointCloud,
    target: PointCloud,
    voxel: float = 3.0,
    gates: Sequence[float] = (40.0, 20.0, 10.0, 5.0),
) -> RigidTransform:
    """Initial guess for odometry from geometry alone.

    Aligns the clouds' centroids and dominant plane normals, then runs
    ICP with a shrinking correspondence gate on voxel-downsampled copies.
    """
    s = voxel_downsample(PointCloud(source.points), voxel).points
    t = voxel_downsample(PointCloud(target.points), voxel).points
    R = _rotation_between(_dominant_normal(s), _dominant_normal(t))
    T = RigidTransform(R, t.mean(axis=0) - R @ s.mean(axis=0))
    src, tgt = PointCloud(s), PointCloud(t)
    tree = cKDTree(t)
    for gate in gates:
        try:
            T, _ = icp_point_to_point(src, tgt, T, gate, 60, 1e-7, target_tree=tree)
        except NoOverlapError:
            continue
    return T


@dataclass(frozen=True)
class FusionResult:
    cloud: PointCloud
    poses: list
    clouds: list  # per-frame clouds in reference coordinates, before downsampling

    def __iter__(self):
        return iter((self.cloud, self.poses))


def fuse_frames(
    frames: Sequence[RgbdFrame],
    method: str = "odometry",
    config: OdometryConfig = OdometryConfig(),
    voxel_size: float = 1.0,
    normals_k: int = 16,
    initial_alignment: bool = True,
) -> FusionResult:
    """Register every frame to frame 0 and merge the clouds.

    Pose ``i`` maps frame-``i`` camera coordinates into the reference
    (frame 0) camera. The merged cloud is voxel-averaged; per-frame
    normals are estimated before merging and carried along.
    """
    frames = list(frames)
    if not frames:
        raise InputError("need at least one frame")
    if method not in ("odometry", "marker"):
        raise InputError(f"unknown registration method {method!r}")
    clouds = [back_project(f, config.depth_scale, config.z_range) for f in frames]
    if normals_k:
        clouds = [
            estimate_normals(c, normals_k) if len(c) > normals_k else c for c in clouds
        ]
    ref = frames[0]
    poses = [RigidTransform.identity()]
    for i in range(1, len(frames)):
        try:
            if method == "marker":
                T = marker_alignment(frames[i], ref, config.depth_scale)
            else:
                init = (
                    coarse_alignment(clouds[i], clouds[0])
                    if initial_alignment
                    else RigidTransform.identity()
                )
                T = rgbd_odometry(frames[i], ref, config, init).transform
        except (WoundScanError, np.linalg.LinAlgError) as exc:
            raise RegistrationError(i, exc) from exc
        poses.append(T)
    moved = [c.transformed(T) for c, T in zip(clouds, poses)]
    merged = PointCloud.concatenate(moved)
    fused = voxel_downsample(merged, voxel_size) if voxel_size > 0 else merged
    return FusionResult(fused, poses, moved)
