import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from woundscan.bspline import (
    BsplineSurface,
    FoldOverWarning,
    basis_functions,
    clamped_knots,
    fit_bspline_surface,
    tessellate,
)
from woundscan.errors import IncreaseSmoothnessError, InputError
from woundscan.mesh import edge_face_incidence, orientation_consistent
from woundscan.rgbd import PointCloud
from woundscan.synth import sample_ground_truth

from oracles import all_basis_values, random_rotation, spherical_cap_area


def full_basis(knots, degree, u):
    span, N = basis_functions(knots, degree, u)
    out = np.zeros((len(np.atleast_1d(u)), len(knots) - degree - 1))
    for row, (s, vals) in enumerate(zip(span, N)):
        out[row, s - degree : s + 1] = vals
    return out


def flat_surface(width=30.0, height=20.0, trim=None):
    """Bilinear patch spanning [0, width] x [0, height] on z = 0."""
    C = np.zeros((2, 2, 3))
    C[1, :, 0] = width
    C[:, 1, 1] = height
    k = clamped_knots(2, 1)
    return BsplineSurface((1, 1), k, k, C, trim)


def tilted_plane_points(rng, n=2000):
    xy = rng.uniform(-20, 20, (n, 2))
    pts = np.column_stack([xy, 0.3 * xy[:, 0] - 0.2 * xy[:, 1] + 7.0])
    R = random_rotation(np.random.default_rng(5))
    return pts @ R.T + [10.0, -4.0, 450.0]


class TestBasis:
    @pytest.mark.parametrize("degree,n_ctrl", [(1, 4), (2, 6), (3, 10), (3, 4)])
    def test_matches_cox_de_boor(self, rng, degree, n_ctrl):
        knots = clamped_knots(n_ctrl, degree)
        us = np.r_[rng.uniform(0, 1, 50), 0.0, 1.0, knots[degree + 1 : -degree - 1]]
        ours = full_basis(knots, degree, us)
        ref = np.array([all_basis_values(knots, degree, u) for u in us])
        assert np.abs(ours - ref).max() < 1e-12

    def test_partition_of_unity_at_random_parameters(self, rng):
        surf = BsplineSurface(
            (3, 3), clamped_knots(16, 3), clamped_knots(12, 3), rng.normal(size=(16, 12, 3))
        )
        u, v = rng.uniform(0, 1, 1000), rng.uniform(0, 1, 1000)
        Bu = full_basis(surf.knots_u, 3, u)
        Bv = full_basis(surf.knots_v, 3, v)
        total = np.einsum("ni,nj->n", Bu, Bv)
        assert np.abs(total - 1).max() < 1e-12
        # evaluation is then a convex combination of the control points
        ones = np.ones_like(surf.control_points)
        const = BsplineSurface(surf.degree, surf.knots_u, surf.knots_v, 4.2 * ones)
        assert np.abs(const.evaluate(u, v) - 4.2).max() < 1e-12

    def test_derivative_matches_finite_difference(self, rng):
        knots = clamped_knots(9, 3)
        u = rng.uniform(0.01, 0.99, 40)
        span, _, dN = basis_functions(knots, 3, u, derivative=True)
        h = 1e-6
        fd = (full_basis(knots, 3, u + h) - full_basis(knots, 3, u - h)) / (2 * h)
        ours = np.zeros_like(fd)
        for row, (s, vals) in enumerate(zip(span, dN)):
            ours[row, s - 3 : s + 1] = vals
        assert np.abs(ours - fd).max() < 1e-5

    def test_too_few_control_points(self):
        with pytest.raises(InputError):
            clamped_knots(3, 3)


class TestSurfaceType:
    def test_unclamped_knots_rejected(self):
        k = np.array([0.0, 0.2, 0.5, 0.8, 1.0])
        with pytest.raises(InputError):
            BsplineSurface((1, 1), k, k, np.zeros((3, 3, 3)))

    def test_grid_size_must_match_knots(self):
        k = clamped_knots(4, 2)
        with pytest.raises(InputError):
            BsplineSurface((2, 2), k, k, np.zeros((5, 4, 3)))

    def test_json_dump(self):
        d = flat_surface().to_json()
        assert d["degree"] == [1, 1]
        assert np.array(d["control_points"]).shape == (2, 2, 3)


class TestFit:
    def test_plane_reproduced(self, rng):
        pts = tilted_plane_points(rng)
        surf = fit_bspline_surface(PointCloud(pts), grid=(8, 8), smoothness=1e-3)
        # plane through the data, from an SVD fit
        c = pts.mean(axis=0)
        n = np.linalg.svd(pts - c)[2][-1]
        U, V = np.meshgrid(np.linspace(0, 1, 25), np.linspace(0, 1, 25))
        S = surf.evaluate(U.ravel(), V.ravel())
        assert np.abs((S - c) @ n).max() < 1e-6
        assert surf.residual_history[-1] < 1e-6

    def test_sine_patch_rms_residual(self, rng):
        # z = sin(x) sin(y) over [0, pi]^2, 10 mm per unit
        xy = rng.uniform(0, np.pi, (6000, 2))
        pts = 10.0 * np.column_stack([xy, np.sin(xy[:, 0]) * np.sin(xy[:, 1])])
        surf = fit_bspline_surface(PointCloud(pts), grid=(10, 10), degree=(3, 3), smoothness=1e-3)
        assert surf.residual_history[-1] < 0.1
        # independent check against the analytic surface on a parameter grid
        U, V = np.meshgrid(np.linspace(0.05, 0.95, 30), np.linspace(0.05, 0.95, 30))
        S = surf.evaluate(U.ravel(), V.ravel())
        z_true = 10.0 * np.sin(S[:, 0] / 10) * np.sin(S[:, 1] / 10)
        assert np.sqrt(np.mean((S[:, 2] - z_true) ** 2)) < 0.1

    @pytest.mark.parametrize("smoothness", [1e-4, 1e-3, 1e-2, 1e-1])
    def test_residual_nonincreasing_across_refinement(self, rng, smoothness):
        xy = rng.uniform(-20, 20, (3000, 2))
        pts = np.column_stack([xy, 0.01 * (xy**2).sum(axis=1) + rng.normal(0, 0.3, 3000)])
        surf = fit_bspline_surface(PointCloud(pts), grid=(12, 12), smoothness=smoothness, iterations=3)
        h = surf.residual_history
        assert len(h) == 4
        assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))

    def test_underdetermined(self, rng):
        with pytest.raises(InputError):
            fit_bspline_surface(PointCloud(rng.normal(size=(50, 3))), grid=(8, 8))

    def test_grid_below_degree(self, rng):
        with pytest.raises(InputError):
            fit_bspline_surface(PointCloud(rng.normal(size=(500, 3))), grid=(3, 8))

    def test_singular_system_without_smoothing(self, rng):
        # data only along two edges leaves interior control points free
        t = rng.uniform(0, 40, 400)
        pts = np.vstack([np.column_stack([t, np.zeros(400), np.zeros(400)]),
                         np.column_stack([np.zeros(400), t, np.zeros(400)])])
        pts[:, 2] = rng.normal(0, 0.01, 800)
        with pytest.raises(IncreaseSmoothnessError):
            fit_bspline_surface(PointCloud(pts), grid=(10, 10), smoothness=0.0)

    def test_fold_over_warns_but_fits(self, rng):
        # a thin S-fold: two sheets stacked over the same parameter cells
        x = rng.uniform(-20, 20, 3000)
        y = rng.uniform(-20, 20, 3000)
        sheet = rng.integers(0, 3, 3000)
        z = np.where(sheet == 1, 6.0, 0.0) + 0.01 * rng.normal(size=3000)
        x = np.where(sheet == 2, x * 0.2, x)
        with pytest.warns(FoldOverWarning):
            surf = fit_bspline_surface(PointCloud(np.column_stack([x, y, z])), grid=(8, 8))
        assert np.isfinite(surf.control_points).all()

    def test_height_field_does_not_warn(self, scene):
        cloud = sample_ground_truth(scene, 20000, seed=1)
        with warnings.catch_warnings():
            warnings.simplefilter("error", FoldOverWarning)
            fit_bspline_surface(cloud, grid=(16, 16))

    def test_trim_mask_marks_data_support(self, rng):
        # 60 x 30 rectangle with a central hole of radius 8
        xy = rng.uniform([-30, -15], [30, 15], (40000, 2))
        xy = xy[np.hypot(xy[:, 0], xy[:, 1]) > 8]
        pts = np.column_stack([xy, np.zeros(len(xy))])
        surf = fit_bspline_surface(PointCloud(pts), grid=(8, 8), trim_resolution=(16, 16))
        hole = np.pi * 64 / 1800
        assert abs((1 - surf.trim_mask.mean()) - hole) < 0.05
        assert not surf.is_supported(0.5, 0.5)
        assert surf.is_supported(0.02, 0.02)


class TestTessellate:
    def test_two_by_two_samples_give_two_triangles(self):
        mesh = tessellate(flat_surface(), (2, 2))
        assert mesh.n_faces == 2
        assert mesh.area() == pytest.approx(600.0, abs=1e-9)

    def test_trimmed_half(self):
        trim = np.zeros((8, 8), dtype=bool)
        trim[:4] = True
        mesh = tessellate(flat_surface(trim=trim), (9, 9))
        untrimmed = 4 * 8
        assert mesh.n_faces == 2 * untrimmed
        assert mesh.area() == pytest.approx(300.0, abs=1e-9)

    def test_orientation_and_edge_use(self, rng):
        xy = rng.uniform(-20, 20, (3000, 2))
        pts = np.column_stack([xy, 0.01 * (xy**2).sum(axis=1)])
        mesh = tessellate(fit_bspline_surface(PointCloud(pts), grid=(10, 10)), (40, 40))
        assert orientation_consistent(mesh.faces)
        _, _, _, counts = edge_face_incidence(mesh.faces)
        assert counts.max() <= 2
        assert mesh.face_areas().min() > 0

    def test_normals_are_unit(self):
        mesh = tessellate(flat_surface(), (5, 5))
        assert np.allclose(np.linalg.norm(mesh.vertex_normals, axis=1), 1.0)

    def test_sample_count_checked(self):
        with pytest.raises(InputError):
            tessellate(flat_surface(), (1, 5))

    def test_plane_area_matches_support_hull(self, rng):
        from scipy.spatial import ConvexHull

        # dense enough that every interior trim cell holds data
        xy = rng.uniform([-30, -20], [30, 20], (40000, 2))
        pts = np.column_stack([xy, np.zeros(len(xy))])
        mesh = tessellate(fit_bspline_surface(PointCloud(pts), grid=(8, 8)), (64, 64))
        hull = ConvexHull(xy).volume
        assert mesh.area() == pytest.approx(hull, rel=0.02)

    def test_sphere_cap_area(self):
        rim, depth = 20.0, 5.0
        R = (rim**2 + depth**2) / (2 * depth)
        g = np.linspace(-rim, rim, 241)
        X, Y = np.meshgrid(g, g)
        inside = X**2 + Y**2 <= rim**2
        x, y = X[inside], Y[inside]
        z = R - depth - np.sqrt(R**2 - x**2 - y**2)  # bowl with its rim on z = 0
        surf = fit_bspline_surface(PointCloud(np.column_stack([x, y, z])), grid=(16, 16))
        mesh = tessellate(surf, (64, 64))
        # keep faces inside the rim; boundary error then cancels on average
        c = mesh.vertices[mesh.faces].mean(axis=1)
        inner = np.hypot(c[:, 0], c[:, 1]) <= rim
        area = mesh.face_areas()[inner].sum()
        assert area == pytest.approx(spherical_cap_area(rim, depth), rel=0.01)


@given(st.integers(0, 2**31))
def test_rigid_motion_commutes_with_fit(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-15, 15, (600, 2))
    pts = np.column_stack([xy, 0.02 * xy[:, 0] ** 2 - 0.01 * xy[:, 0] * xy[:, 1]])
    R = random_rotation(rng)
    t = rng.normal(size=3) * 50
    a = fit_bspline_surface(PointCloud(pts), grid=(6, 6), iterations=1)
    b = fit_bspline_surface(PointCloud(pts @ R.T + t), grid=(6, 6), iterations=1)
    assert a.residual_history[-1] == pytest.approx(b.residual_history[-1], rel=1e-6, abs=1e-9)
