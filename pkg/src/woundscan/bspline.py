"""Tensor-product B-spline surfaces: evaluation, least-squares fitting, tessellation.

Fitting follows the usual loop for unorganised scans:

1. parameterise the points by projecting them on their PCA plane and
   scaling the in-plane coordinates to ``[0, 1]^2``;
2. solve a regularised linear least-squares problem for the control grid;
3. re-project every point onto the current surface (Gauss-Newton on its
   ``(u, v)``) and solve again, ``iterations`` times.

The regulariser is a discrete thin-plate energy: squared second divided
differences of the control grid taken over the Greville abscissae, in
physical units. Affine surfaces are in its null space, so planes are
reproduced exactly for any smoothness weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import IncreaseSmoothnessError, InputError
from .mesh import TriangleMesh
from .rgbd import PointCloud


class FoldOverWarning(UserWarning):
    """The cloud is not a height field over its PCA plane."""


def clamped_knots(n_ctrl: int, degree: int) -> np.ndarray:
    """Uniform clamped knot vector on [0, 1] for ``n_ctrl`` control points."""
    if n_ctrl < degree + 1:
        raise InputError(f"need at least {degree + 1} control points for degree {degree}")
    inner = np.linspace(0.0, 1.0, n_ctrl - degree + 1)
    return np.concatenate([np.zeros(degree), inner, np.ones(degree)])


def greville(knots: np.ndarray, degree: int) -> np.ndarray:
    n = len(knots) - degree - 1
    return np.array([knots[i + 1 : i + degree + 1].mean() for i in range(n)]) if degree > 0 else knots[:-1]


def find_span(knots: np.ndarray, degree: int, u: np.ndarray) -> np.ndarray:
    n = len(knots) - degree - 1
    span = np.searchsorted(knots, u, side="right") - 1
    return np.clip(span, degree, n - 1)


def basis_functions(knots: np.ndarray, degree: int, u, derivative: bool = False):
    """Nonzero basis values (and first derivatives) at parameters ``u``.

    Returns ``span`` (N,) and ``N`` (N, degree+1) where column ``k``
    belongs to basis function ``span - degree + k``; with
    ``derivative=True`` also ``dN`` of the same shape.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    p = degree
    span = find_span(knots, p, u)

    def values(deg):
        N = np.zeros((len(u), deg + 1))
        N[:, 0] = 1.0
        left = np.zeros((len(u), deg + 1))
        right = np.zeros((len(u), deg + 1))
        for j in range(1, deg + 1):
            left[:, j] = u - knots[span + 1 - j]
            right[:, j] = knots[span + j] - u
            saved = np.zeros(len(u))
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                temp = np.divide(N[:, r], denom, out=np.zeros(len(u)), where=denom != 0)
                N[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            N[:, j] = saved
        return N

    N = values(p)
    if not derivative:
        return span, N
    dN = np.zeros_like(N)
    if p == 0:
        return span, N, dN
    Nm = values(p - 1)  # functions span-p+1 .. span of degree p-1
    for k in range(p + 1):
        i = span - p + k
        if k >= 1:
            d1 = knots[i + p] - knots[i]
            dN[:, k] += np.divide(p * Nm[:, k - 1], d1, out=np.zeros(len(u)), where=d1 != 0)
        if k <= p - 1:
            d2 = knots[i + p + 1] - knots[i + 1]
            dN[:, k] -= np.divide(p * Nm[:, k], d2, out=np.zeros(len(u)), where=d2 != 0)
    return span, N, dN


@dataclass(frozen=True)
class BsplineSurface:
    degree: tuple
    knots_u: np.ndarray
    knots_v: np.ndarray
    control_points: np.ndarray  # (nu, nv, 3)
    trim_mask: Optional[np.ndarray] = None  # (tu, tv) bool, True = supported
    residual_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        du, dv = self.degree
        if du < 1 or dv < 1:
            raise InputError("degrees must be at least 1")
        C = np.asarray(self.control_points, dtype=float)
        ku = np.asarray(self.knots_u, dtype=float)
        kv = np.asarray(self.knots_v, dtype=float)
        for k, d, n in ((ku, du, C.shape[0]), (kv, dv, C.shape[1])):
            if np.any(np.diff(k) < 0):
                raise InputError("knot vector must be nondecreasing")
            if len(k) - d - 1 != n:
                raise InputError("control grid size does not match knots and degree")
            if not (np.all(k[: d + 1] == k[0]) and np.all(k[-d - 1 :] == k[-1])):
                raise InputError("knot vector must be clamped")
        object.__setattr__(self, "control_points", C)
        object.__setattr__(self, "knots_u", ku)
        object.__setattr__(self, "knots_v", kv)
        if self.trim_mask is not None:
            object.__setattr__(self, "trim_mask", np.asarray(self.trim_mask, dtype=bool))

    @property
    def grid(self) -> tuple[int, int]:
        return self.control_points.shape[:2]

    def evaluate(self, u, v, derivatives: bool = False):
        """Surface points at parameter pairs; optionally also dS/du, dS/dv."""
        u = np.clip(np.atleast_1d(np.asarray(u, dtype=float)), 0.0, 1.0)
        v = np.clip(np.atleast_1d(np.asarray(v, dtype=float)), 0.0, 1.0)
        p, q = self.degree
        su, Nu, dNu = basis_functions(self.knots_u, p, u, True)
        sv, Nv, dNv = basis_functions(self.knots_v, q, v, True)
        iu = (su - p)[:, None] + np.arange(p + 1)
        iv = (sv - q)[:, None] + np.arange(q + 1)
        n = len(u)
        P = self.control_points[iu[:, :, None], iv[:, None, :]].reshape(n, -1, 3)

        def combine(Bu, Bv):
            W = (Bu[:, :, None] * Bv[:, None, :]).reshape(n, -1)
            return np.einsum("nj,njk->nk", W, P)

        S = combine(Nu, Nv)
        if not derivatives:
            return S
        return S, combine(dNu, Nv), combine(Nu, dNv)

    def is_supported(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.trim_mask is None:
            return np.ones(np.broadcast(u, v).shape, dtype=bool)
        tu, tv = self.trim_mask.shape
        i = np.clip((u * tu).astype(np.int64), 0, tu - 1)
        j = np.clip((v * tv).astype(np.int64), 0, tv - 1)
        return self.trim_mask[i, j]

    def to_json(self) -> dict:
        return {
            "degree": list(self.degree),
            "knots_u": self.knots_u.tolist(),
            "knots_v": self.knots_v.tolist(),
            "control_points": self.control_points.tolist(),
            "trim_mask": None if self.trim_mask is None else self.trim_mask.astype(int).tolist(),
        }


def design_matrix(knots, u: np.ndarray, v: np.ndarray, grid, degree) -> sparse.csr_matrix:
    """Sparse (N, nu*nv) matrix of tensor-product basis values."""
    knots_u, knots_v = knots
    p, q = degree
    nu, nv = grid
    su, Nu = basis_functions(knots_u, p, u)
    sv, Nv = basis_functions(knots_v, q, v)
    iu = (su - p)[:, None] + np.arange(p + 1)
    iv = (sv - q)[:, None] + np.arange(q + 1)
    cols = (iu[:, :, None] * nv + iv[:, None, :]).reshape(len(u), -1)
    vals = (Nu[:, :, None] * Nv[:, None, :]).reshape(len(u), -1)
    rows = np.repeat(np.arange(len(u)), cols.shape[1])
    return sparse.csr_matrix((vals.reshape(-1), (rows, cols.reshape(-1))), shape=(len(u), nu * nv))


def thin_plate_operator(gu: np.ndarray, gv: np.ndarray, length_u: float, length_v: float) -> sparse.csr_matrix:
    """Rows whose squared norm approximates the bending energy of the grid.

    ``gu``, ``gv`` are the Greville abscissae; ``length_*`` convert
    parameter units to millimetres.
    """
    xu = gu * length_u
    xv = gv * length_v
    nu, nv = len(xu), len(xv)
    rows, cols, vals = [], [], []
    r = 0

    def idx(i, j):
        return i * nv + j

    def cell(x, i):
        lo = x[max(i - 1, 0)]
        hi = x[min(i + 1, len(x) - 1)]
        return max(0.5 * (hi - lo), 1e-12)

    # d2/du2
    for i in range(1, nu - 1):
        h0 = xu[i] - xu[i - 1]
        h1 = xu[i + 1] - xu[i]
        c = 2.0 / (h0 + h1)
        for j in range(nv):
            w = np.sqrt(cell(xu, i) * cell(xv, j))
            for ii, coef in ((i - 1, c / h0), (i, -c * (1 / h0 + 1 / h1)), (i + 1, c / h1)):
                rows.append(r)
                cols.append(idx(ii, j))
                vals.append(w * coef)
            r += 1
    # d2/dv2
    for j in range(1, nv - 1):
        h0 = xv[j] - xv[j - 1]
        h1 = xv[j + 1] - xv[j]
        c = 2.0 / (h0 + h1)
        for i in range(nu):
            w = np.sqrt(cell(xu, i) * cell(xv, j))
            for jj, coef in ((j - 1, c / h0), (j, -c * (1 / h0 + 1 / h1)), (j + 1, c / h1)):
                rows.append(r)
                cols.append(idx(i, jj))
                vals.append(w * coef)
            r += 1
    # mixed term, counted twice in the thin-plate energy
    for i in range(nu - 1):
        hu = xu[i + 1] - xu[i]
        for j in range(nv - 1):
            hv = xv[j + 1] - xv[j]
            w = np.sqrt(2.0 * hu * hv)
            c = 1.0 / (hu * hv)
            for ii, jj, s in ((i, j, 1), (i + 1, j, -1), (i, j + 1, -1), (i + 1, j + 1, 1)):
                rows.append(r)
                cols.append(idx(ii, jj))
                vals.append(w * s * c)
            r += 1
    return sparse.csr_matrix((vals, (rows, cols)), shape=(r, nu * nv))


@dataclass
class _Frame:
    origin: np.ndarray
    axes: np.ndarray  # rows: e1, e2, normal
    lo: np.ndarray
    span: np.ndarray


def _pca_frame(points: np.ndarray) -> _Frame:
    origin = points.mean(axis=0)
    c = points - origin
    _, vecs = np.linalg.eigh(c.T @ c)
    e1, e2 = vecs[:, 2], vecs[:, 1]
    # deterministic signs
    e1 = e1 * (1 if e1[np.argmax(np.abs(e1))] > 0 else -1)
    e2 = e2 * (1 if e2[np.argmax(np.abs(e2))] > 0 else -1)
    n = np.cross(e1, e2)
    axes = np.vstack([e1, e2, n])
    local = c @ axes.T
    lo = local[:, :2].min(axis=0)
    span = np.maximum(local[:, :2].max(axis=0) - lo, 1e-9)
    return _Frame(origin, axes, lo, span)


def _solve(A, D, X, smoothness):
    M = (A.T @ A).tocsc()
    if smoothness > 0:
        M = M + smoothness * (D.T @ D).tocsc()
    rhs = A.T @ X
    dense = M.toarray()
    # symmetric positive semi-definite, so eigenvalues give the 2-norm condition
    try:
        eig = np.linalg.eigvalsh(dense)
        cond = eig[-1] / eig[0] if eig[0] > 0 else np.inf
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e13:
        raise IncreaseSmoothnessError(
            f"normal equations are singular (condition {cond:.3g}); increase smoothness"
        )
    return np.linalg.solve(dense, rhs)


def project_to_surface(surface: BsplineSurface, points: np.ndarray, u, v, iterations: int = 6):
    """Closest-point refinement of ``(u, v)`` by damped Gauss-Newton.

    A step is kept per point only when it reduces that point's distance,
    so the returned distances never exceed the starting ones.
    """
    u = np.asarray(u, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    S = surface.evaluate(u, v)
    dist2 = np.sum((S - points) ** 2, axis=1)
    for _ in range(iterations):
        S, Su, Sv = surface.evaluate(u, v, derivatives=True)
        r = S - points
        a = np.einsum("ij,ij->i", Su, Su)
        b = np.einsum("ij,ij->i", Su, Sv)
        c = np.einsum("ij,ij->i", Sv, Sv)
        gu = np.einsum("ij,ij->i", Su, r)
        gv = np.einsum("ij,ij->i", Sv, r)
        det = a * c - b * b
        ok = det > 1e-18 * np.maximum(a * c, 1e-300)
        safe = np.where(ok, det, 1.0)
        du = np.where(ok, -(c * gu - b * gv) / safe, 0.0)
        dv = np.where(ok, -(a * gv - b * gu) / safe, 0.0)
        improved_any = False
        step = 1.0
        pending = np.ones(len(u), dtype=bool)
        for _half in range(4):
            un = np.clip(u + step * du, 0.0, 1.0)
            vn = np.clip(v + step * dv, 0.0, 1.0)
            Sn = surface.evaluate(un[pending], vn[pending])
            d2n = np.sum((Sn - points[pending]) ** 2, axis=1)
            better = d2n < dist2[pending]
            idx = np.nonzero(pending)[0][better]
            u[idx] = un[idx]
            v[idx] = vn[idx]
            dist2[idx] = d2n[better]
            improved_any |= bool(better.any())
            pending[np.nonzero(pending)[0][better]] = False
            if not pending.any():
                break
            step *= 0.5
        if not improved_any:
            break
    return u, v, np.sqrt(dist2)


def fit_bspline_surface(
    cloud: PointCloud,
    grid: tuple = (16, 16),
    degree: tuple = (3, 3),
    smoothness: float = 1e-2,
    iterations: int = 2,
    trim_resolution: tuple = (64, 64),
) -> BsplineSurface:
    """Least-squares B-spline surface through a roughly height-field cloud.

    ``residual_history`` on the result holds the RMS point-to-surface
    distance after the initial fit and after each refinement round.
    """
    pts = cloud.points
    nu, nv = grid
    p, q = degree
    if nu < p + 1 or nv < q + 1:
        raise InputError("control grid must exceed the degree in both directions")
    if len(pts) < nu * nv:
        raise InputError(f"{len(pts)} points cannot determine a {nu}x{nv} control grid")
    if smoothness < 0:
        raise InputError("smoothness must be non-negative")

    frame = _pca_frame(pts)
    local = (pts - frame.origin) @ frame.axes.T
    u = (local[:, 0] - frame.lo[0]) / frame.span[0]
    v = (local[:, 1] - frame.lo[1]) / frame.span[1]
    _check_fold_over(u, v, local[:, 2], trim_resolution, frame.span)

    ku = clamped_knots(nu, p)
    kv = clamped_knots(nv, q)
    gu, gv = greville(ku, p), greville(kv, q)
    D = thin_plate_operator(gu, gv, frame.span[0], frame.span[1])

    # work in the PCA frame; control points start on the PCA plane
    A = design_matrix((ku, kv), u, v, (nu, nv), (p, q))
    C = _solve(A, D, local, smoothness)
    surf_local = BsplineSurface((p, q), ku, kv, C.reshape(nu, nv, 3))
    u, v, dist = project_to_surface(surf_local, local, u, v)
    history = [float(np.sqrt(np.mean(dist**2)))]
    for _ in range(iterations):
        A = design_matrix((ku, kv), u, v, (nu, nv), (p, q))
        C = _solve(A, D, local, smoothness)
        surf_local = BsplineSurface((p, q), ku, kv, C.reshape(nu, nv, 3))
        u, v, dist = project_to_surface(surf_local, local, u, v)
        history.append(float(np.sqrt(np.mean(dist**2))))

    tu, tv = trim_resolution
    trim = np.zeros((tu, tv), dtype=bool)
    trim[np.clip((u * tu).astype(int), 0, tu - 1), np.clip((v * tv).astype(int), 0, tv - 1)] = True

    world = C.reshape(-1, 3) @ frame.axes + frame.origin
    return BsplineSurface((p, q), ku, kv, world.reshape(nu, nv, 3), trim, tuple(history))


def _check_fold_over(u, v, height, resolution, span=(1.0, 1.0)) -> None:
    tu, tv = resolution
    cell = np.clip((u * tu).astype(int), 0, tu - 1) * tv + np.clip((v * tv).astype(int), 0, tv - 1)
    order = np.argsort(cell, kind="stable")
    cs = cell[order]
    hs = height[order]
    starts = np.r_[0, np.nonzero(np.diff(cs))[0] + 1]
    hi = np.maximum.reduceat(hs, starts)
    lo = np.minimum.reduceat(hs, starts)
    counts = np.diff(np.r_[starts, len(cs)])
    spread = (hi - lo)[counts >= 2]
    if spread.size == 0:
        return
    med = np.median(spread)
    scale = max(np.abs(height).max(), 1e-9)
    bad = spread > 10.0 * med
    bad &= spread > 1e-6 * scale
    # a height field with slope up to 1 can vary by a cell diagonal; on
    # noise-free data the median alone is ~0 and would flag every slope
    bad &= spread > np.hypot(span[0] / tu, span[1] / tv)
    if bad.any():
        warnings.warn(
            f"{int(bad.sum())} parameter cells have depth spread above 10x the median "
            f"({med:.3g} mm); the cloud folds over its PCA plane",
            FoldOverWarning,
            stacklevel=3,
        )


def tessellate(surface: BsplineSurface, samples: tuple = (64, 64)) -> TriangleMesh:
    """Triangulate the surface on a regular parameter grid, skipping trimmed cells."""
    mu, mv = samples
    if mu < 2 or mv < 2:
        raise InputError("need at least 2 samples per direction")
    us = np.linspace(0.0, 1.0, mu)
    vs = np.linspace(0.0, 1.0, mv)
    U, V = np.meshgrid(us, vs, indexing="ij")
    S, Su, Sv = surface.evaluate(U.reshape(-1), V.reshape(-1), derivatives=True)
    normals = np.cross(Su, Sv)
    nn = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(nn > 1e-12, normals / np.maximum(nn, 1e-300), [0.0, 0.0, 1.0])

    ci, cj = np.meshgrid(np.arange(mu - 1), np.arange(mv - 1), indexing="ij")
    ci, cj = ci.reshape(-1), cj.reshape(-1)
    keep = surface.is_supported((us[ci] + us[ci + 1]) / 2, (vs[cj] + vs[cj + 1]) / 2)
    ci, cj = ci[keep], cj[keep]
    a = ci * mv + cj
    b = (ci + 1) * mv + cj
    c = (ci + 1) * mv + cj + 1
    d = ci * mv + cj + 1
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    # interleave so each cell's two triangles stay adjacent
    n = len(a)
    faces = faces.reshape(2, n, 3).transpose(1, 0, 2).reshape(-1, 3)

    cr = np.cross(S[faces[:, 1]] - S[faces[:, 0]], S[faces[:, 2]] - S[faces[:, 0]])
    area2 = np.linalg.norm(cr, axis=1)
    scale = max(np.ptp(S, axis=0).max(), 1e-12) if len(S) else 1.0
    faces = faces[area2 > 1e-14 * scale**2]

    used, inverse = np.unique(faces.reshape(-1), return_inverse=True)
    return TriangleMesh(S[used], inverse.reshape(-1, 3), vertex_normals=normals[used])
