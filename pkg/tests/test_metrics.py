import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from woundscan.errors import InputError
from woundscan.mesh import TriangleMesh
from woundscan.metrics import (
    ReconstructionMetrics,
    crop_to_region,
    distance_metrics,
    evaluate_reconstruction,
    nearest_neighbors,
    sample_mesh_uniform,
)
from woundscan.obb import OrientedBox
from woundscan.rgbd import PointCloud
from woundscan.transforms import RigidTransform

from oracles import brute_force_metrics, brute_force_nn, grid_mesh, random_rotation

seeds = st.integers(0, 2**31)


def plane_grid(n=30, spacing=1.0):
    g = np.arange(n) * spacing
    X, Y = np.meshgrid(g, g)
    pts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    return PointCloud(pts, normals=np.tile([0.0, 0.0, 1.0], (len(pts), 1)))


def unit_normals(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def as_dict(m: ReconstructionMetrics):
    return {"ad_mm": m.ad_mm, "hd_mm": m.hd_mm, "hd90_mm": m.hd90_mm, "nc": m.nc}


class TestDistanceMetrics:
    def test_identical_clouds(self):
        c = plane_grid(10)
        m = distance_metrics(c, c)
        assert (m.ad_mm, m.hd_mm, m.hd90_mm, m.nc) == (0.0, 0.0, 0.0, 1.0)

    def test_normal_shift_of_plane(self):
        gt = plane_grid()
        pred = PointCloud(gt.points + [0.0, 0.0, 1.0], normals=gt.normals)
        m = distance_metrics(pred, gt)
        assert m.ad_mm == pytest.approx(1.0, abs=1e-12)
        assert m.hd_mm == pytest.approx(1.0, abs=1e-12)
        assert m.hd90_mm == pytest.approx(1.0, abs=1e-12)
        assert m.nc == 1.0

    def test_in_plane_shift_matches_exhaustive_search(self):
        # on a finite grid an in-plane shift only moves the edge columns
        gt = plane_grid(12)
        pred = PointCloud(gt.points + [1.0, 0.0, 0.0], normals=gt.normals)
        m = distance_metrics(pred, gt)
        assert as_dict(m) == brute_force_metrics(pred.points, gt.points, pred.normals, gt.normals)
        assert m.hd_mm == 1.0 and m.nc == 1.0

    @given(seeds, st.integers(1, 200), st.integers(1, 200), st.booleans())
    def test_matches_brute_force_exactly(self, seed, n, m, lattice):
        rng = np.random.default_rng(seed)
        if lattice:
            # integer lattice points make distance ties common
            P = rng.integers(-3, 4, (n, 3)).astype(float)
            Q = rng.integers(-3, 4, (m, 3)).astype(float)
        else:
            P = rng.normal(size=(n, 3)) * 10
            Q = rng.normal(size=(m, 3)) * 10
        nP, nQ = unit_normals(rng, n), unit_normals(rng, m)
        ours = distance_metrics(PointCloud(P, normals=nP), PointCloud(Q, normals=nQ))
        assert as_dict(ours) == brute_force_metrics(P, Q, nP, nQ)

    @given(seeds)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = PointCloud(rng.normal(size=(150, 3)), normals=unit_normals(rng, 150))
        b = PointCloud(rng.normal(size=(90, 3)), normals=unit_normals(rng, 90))
        assert as_dict(distance_metrics(a, b)) == as_dict(distance_metrics(b, a))

    @given(seeds)
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = PointCloud(rng.normal(size=(300, 3)) * 20, normals=unit_normals(rng, 300))
        b = PointCloud(a.points + rng.normal(size=(300, 3)) * 0.5, normals=unit_normals(rng, 300))
        T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 100)
        m0 = distance_metrics(a, b)
        m1 = distance_metrics(a.transformed(T), b.transformed(T))
        for key, v in as_dict(m0).items():
            assert as_dict(m1)[key] == pytest.approx(v, rel=1e-9, abs=1e-9)

    def test_percentile_ordering_on_noisy_copies(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(20, 120))
            P = rng.normal(size=(n, 3)) * 10
            Q = P + rng.normal(size=(n, 3)) * rng.uniform(0.05, 2.0)
            m = distance_metrics(PointCloud(P), PointCloud(Q))
            assert 0 <= m.ad_mm <= m.hd90_mm <= m.hd_mm

    def test_hd90_never_exceeds_hd(self, rng):
        for _ in range(200):
            P = rng.normal(size=(int(rng.integers(1, 50)), 3))
            Q = rng.normal(size=(int(rng.integers(1, 50)), 3))
            m = distance_metrics(PointCloud(P), PointCloud(Q))
            assert m.hd90_mm <= m.hd_mm

    def test_mean_can_exceed_nearest_rank_p90(self):
        # nine exact matches and one 100 mm outlier in each direction
        P = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        Q = P.copy()
        P[9, 2] = Q[9, 2] - 100.0
        m = distance_metrics(PointCloud(P), PointCloud(Q))
        assert m.hd90_mm < m.ad_mm <= m.hd_mm

    def test_nc_absent_without_normals(self):
        c = PointCloud(np.zeros((3, 3)) + np.arange(3)[:, None])
        assert distance_metrics(c, c).nc is None

    def test_empty_cloud(self):
        with pytest.raises(InputError):
            distance_metrics(PointCloud(np.zeros((0, 3))), plane_grid(3))

    def test_report_formats(self):
        m = distance_metrics(plane_grid(4), plane_grid(4))
        d = json.loads(m.to_json())
        assert set(d) == {"ad_mm", "hd_mm", "hd90_mm", "nc", "n_points_eval"}
        assert m.table_row().startswith("AD 0.000 | HD 0.000")


class TestNearestNeighbors:
    @given(seeds)
    def test_matches_exhaustive_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        R = rng.integers(-2, 3, (60, 3)).astype(float)
        Q = rng.integers(-2, 3, (40, 3)).astype(float) + 0.5 * rng.integers(0, 2, (40, 3))
        d, j = nearest_neighbors(Q, R)
        d_ref, j_ref = brute_force_nn(Q, R)
        assert np.array_equal(d, d_ref) and np.array_equal(j, j_ref)


class TestSampling:
    def test_points_inside_single_triangle(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [4, 0, 0], [0, 3, 0.0]]), [[0, 1, 2]])
        cloud = sample_mesh_uniform(mesh, 1000, seed=3)
        x, y = cloud.points[:, 0], cloud.points[:, 1]
        # barycentric coordinates of the right triangle
        l1, l2 = x / 4, y / 3
        assert np.all(l1 >= 0) and np.all(l2 >= 0) and np.all(l1 + l2 <= 1 + 1e-12)
        assert np.allclose(cloud.normals, [0, 0, 1])

    def test_area_proportional_face_share(self):
        V = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0.0]])
        mesh = TriangleMesh(V, [[0, 1, 2], [3, 4, 5]])  # areas 1 and 3
        n = 40000
        cloud = sample_mesh_uniform(mesh, n, seed=0)
        share = np.mean(cloud.points[:, 0] >= 10)
        sigma = np.sqrt(0.75 * 0.25 / n)
        assert abs(share - 0.75) <= max(3 * sigma, 0.01)

    @given(seeds)
    def test_face_counts_within_three_sigma(self, seed):
        rng = np.random.default_rng(seed)
        V, F = grid_mesh(3)
        V = V + np.column_stack([np.zeros((len(V), 2)), rng.normal(size=len(V))])
        mesh = TriangleMesh(V, F)
        n = 20000
        cloud = sample_mesh_uniform(mesh, n, seed=seed)
        # recover each sample's face from its xy cell and diagonal side
        ij = np.minimum(np.floor(cloud.points[:, :2]).astype(int), 2)
        fx = cloud.points[:, 0] - ij[:, 0]
        fy = cloud.points[:, 1] - ij[:, 1]
        face = 2 * (ij[:, 1] * 3 + ij[:, 0]) + (fy > fx)
        counts = np.bincount(face, minlength=mesh.n_faces)
        p = mesh.face_areas() / mesh.area()
        sigma = np.sqrt(n * p * (1 - p))
        # Bonferroni-free 3 sigma per face leaves a small false-alarm rate; 4 sigma is its union bound
        assert np.all(np.abs(counts - n * p) <= 4 * sigma)

    def test_deterministic_given_seed(self):
        V, F = grid_mesh(4)
        mesh = TriangleMesh(V, F)
        a, b = sample_mesh_uniform(mesh, 500, 11), sample_mesh_uniform(mesh, 500, 11)
        assert np.array_equal(a.points, b.points)
        assert not np.array_equal(a.points, sample_mesh_uniform(mesh, 500, 12).points)

    def test_zero_area_mesh(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), [[0, 1, 2]])
        with pytest.raises(InputError):
            sample_mesh_uniform(mesh, 10)


class TestCrop:
    def test_box_containing_everything(self):
        c = plane_grid(5)
        out = crop_to_region(c, OrientedBox.from_bounds([-1, -1, -1], [10, 10, 1]))
        assert np.array_equal(out.points, c.points)
        assert np.array_equal(out.normals, c.normals)

    def test_box_containing_nothing(self):
        out = crop_to_region(plane_grid(5), OrientedBox.from_bounds([100, 100, 100], [101, 101, 101]))
        assert out.is_empty

    def test_lattice_count(self):
        g = np.arange(10.0)
        X, Y, Z = np.meshgrid(g, g, g)
        c = PointCloud(np.column_stack([X.ravel(), Y.ravel(), Z.ravel()]))
        out = crop_to_region(c, OrientedBox.from_bounds([0, 0, 0], [4.5, 9, 9]))
        # x in {0..4}: five of ten planes, closed box includes the upper face at 9
        assert len(out) == 5 * 10 * 10


class TestEvaluate:
    def test_identity(self):
        c = plane_grid(10)
        m = evaluate_reconstruction(c, c)
        assert (m.ad_mm, m.hd_mm, m.hd90_mm, m.nc) == (0.0, 0.0, 0.0, 1.0)

    def test_icp_recovers_displaced_copy(self, scene):
        from woundscan.synth import sample_ground_truth

        gt = sample_ground_truth(scene, 30000, seed=2)
        D = RigidTransform.from_axis_angle([0.05, -0.03, 0.1], [20.0, -10.0, 5.0])
        pred = gt.transformed(D)
        init = RigidTransform(np.eye(3), [1.0, 0.0, 0.0]) @ D.inverse()
        m = evaluate_reconstruction(pred, gt, init=init)
        assert m.ad_mm < 0.01

    def test_mesh_inputs_are_sampled(self):
        V, F = grid_mesh(10)
        mesh = TriangleMesh(V, F)
        m = evaluate_reconstruction(mesh, mesh, n_samples=5000)
        assert m.n_points_eval == 10000
        assert m.hd_mm < 0.5
