import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from woundscan.errors import BehindCameraError, InputError
from woundscan.rgbd import (
    CameraIntrinsics,
    PointCloud,
    RgbdFrame,
    back_project,
    estimate_normals,
    fill_depth_holes,
    project,
    voxel_downsample,
)
from woundscan.transforms import RigidTransform

from oracles import median_of_nonzero_neighbours, random_rotation

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def frame_with(depth, K=K500, mask=None):
    depth = np.asarray(depth, dtype=np.uint16)
    color = np.zeros(depth.shape + (3,), dtype=np.uint8)
    return RgbdFrame(color, depth, K, mask=mask)


def single_pixel_depth(x, y, z, K=K500):
    d = np.zeros((K.height, K.width), dtype=np.uint16)
    d[y, x] = z
    return d


class TestIntrinsics:
    def test_matrix_form(self):
        assert np.array_equal(K500.K, [[500, 0, 320], [0, 500, 240], [0, 0, 1]])

    @pytest.mark.parametrize("kw", [dict(fx=0.0), dict(fy=-1.0), dict(cx=640.0), dict(cy=-1.0)])
    def test_invariants_enforced(self, kw):
        args = dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480) | kw
        with pytest.raises(InputError):
            CameraIntrinsics(**args)

    def test_json_round_trip(self):
        assert CameraIntrinsics.from_json(K500.to_json()) == K500


class TestFrame:
    def test_mask_shape_must_match(self):
        with pytest.raises(InputError):
            frame_with(np.zeros((480, 640)), mask=np.zeros((10, 10), dtype=np.uint8))

    def test_mask_values_restricted_to_binary(self):
        with pytest.raises(InputError):
            frame_with(np.zeros((480, 640)), mask=np.full((480, 640), 2, dtype=np.uint8))

    def test_depth_shape_must_match_intrinsics(self):
        with pytest.raises(InputError):
            frame_with(np.zeros((10, 10)))


class TestBackProject:
    def test_principal_point_maps_to_optical_axis(self):
        cloud = back_project(frame_with(single_pixel_depth(320, 240, 500)))
        assert np.array_equal(cloud.points, [[0.0, 0.0, 500.0]])

    def test_off_axis_pixel(self):
        # X = Z (x - cx) / fx = 1000 * 100 / 500
        cloud = back_project(frame_with(single_pixel_depth(420, 240, 1000)), z_range=(0, 2000))
        assert np.allclose(cloud.points, [[200.0, 0.0, 1000.0]], atol=1e-12)
        assert np.array_equal(cloud.source_pixel, [[0, 420, 240]])

    def test_all_zero_depth_gives_empty_cloud(self):
        assert back_project(frame_with(np.zeros((480, 640)))).is_empty

    def test_z_range_and_depth_scale(self):
        d = np.zeros((480, 640), dtype=np.uint16)
        d[0, :4] = [299, 300, 800, 801]
        assert len(back_project(frame_with(d))) == 2
        d[0, :4] = [700, 1000, 1500, 1700]
        # at 0.5 mm per unit these are 350, 500, 750 and 850 mm
        assert len(back_project(frame_with(d))) == 1
        assert len(back_project(frame_with(d), depth_scale=0.5)) == 3

    def test_row_major_order_and_labels(self):
        d = np.zeros((480, 640), dtype=np.uint16)
        d[5, 7] = d[3, 9] = d[3, 2] = 500
        mask = np.zeros((480, 640), dtype=np.uint8)
        mask[3, 9] = 1
        cloud = back_project(frame_with(d, mask=mask))
        assert cloud.source_pixel[:, 1:].tolist() == [[2, 3], [9, 3], [7, 5]]
        assert cloud.labels.tolist() == [0, 1, 0]

    def test_negative_z_range_rejected(self):
        with pytest.raises(InputError):
            back_project(frame_with(np.zeros((480, 640))), z_range=(-1.0, 10.0))

    @given(arrays(np.uint16, (6, 8), elements=st.integers(0, 1200)))
    def test_count_matches_pixels_in_range(self, depth):
        K = CameraIntrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
        cloud = back_project(frame_with(depth, K), z_range=(300.0, 800.0))
        assert len(cloud) == int(((depth >= 300) & (depth <= 800)).sum())

    @given(arrays(np.uint16, (6, 8), elements=st.integers(0, 1200)))
    def test_round_trip_with_project(self, depth):
        K = CameraIntrinsics(11.0, 9.0, 3.5, 2.5, 8, 6)
        cloud = back_project(frame_with(depth, K), z_range=(1.0, 2000.0))
        for p, (_, x, y) in zip(cloud.points, cloud.source_pixel):
            px, py, Z = project(p, K)
            assert abs(px - x) < 1e-9 and abs(py - y) < 1e-9
            assert Z == depth[y, x]


class TestProject:
    def test_optical_axis(self):
        assert project([0, 0, 500], K500) == (320.0, 240.0, 500.0)

    def test_inverse_of_back_project_example(self):
        assert project([200, 0, 1000], K500) == pytest.approx((420.0, 240.0, 1000.0))

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project([0, 0, -1], K500)

    def test_out_of_frame_flagged(self):
        assert project([1000, 0, 100], K500) is None


class TestFillDepthHoles:
    def test_single_hole_in_constant_image(self):
        d = np.full((7, 7), 450, dtype=np.uint16)
        d[3, 3] = 0
        out = fill_depth_holes(d, window=3, min_valid=1)
        assert np.all(out == 450)

    def test_all_zero_unchanged(self):
        d = np.zeros((5, 5), dtype=np.uint16)
        assert np.array_equal(fill_depth_holes(d, 3, 1), d)

    def test_ramp_centre_is_neighbour_median(self):
        d = (np.arange(1, 26, dtype=np.uint16) * 100).reshape(5, 5)
        d[2, 2] = 0
        expected = median_of_nonzero_neighbours(d, 2, 2, 3)
        assert fill_depth_holes(d, 3, 1)[2, 2] == expected == 1300

    def test_idempotent_on_constant(self):
        d = np.full((6, 9), 612, dtype=np.uint16)
        once = fill_depth_holes(d, 5, 3)
        assert np.array_equal(once, d)
        assert np.array_equal(fill_depth_holes(once, 5, 3), once)

    def test_min_valid_threshold(self):
        d = np.zeros((5, 5), dtype=np.uint16)
        d[0, 0] = 500
        out = fill_depth_holes(d, 3, min_valid=2)
        assert out[1, 1] == 0

    @pytest.mark.parametrize("window", [1, 2, 4])
    def test_window_must_be_odd_and_at_least_three(self, window):
        with pytest.raises(InputError):
            fill_depth_holes(np.zeros((5, 5), dtype=np.uint16), window)

    @given(arrays(np.uint16, (9, 9), elements=st.integers(0, 3000)), st.sampled_from([3, 5]))
    def test_never_introduces_zero(self, depth, window):
        out = fill_depth_holes(depth, window, 1)
        assert np.all(out[depth > 0] > 0)


class TestNormals:
    def test_plane_normals_face_viewpoint(self, rng):
        pts = np.column_stack([rng.uniform(-5, 5, (100, 2)), np.zeros(100)])
        out = estimate_normals(PointCloud(pts), k=8, viewpoint=(0, 0, -10))
        assert np.abs(out.normals - [0, 0, -1]).max() < 1e-6

    def test_sphere_normals_point_inward_toward_centre(self, rng):
        v = rng.normal(size=(3000, 3))
        pts = 20.0 * v / np.linalg.norm(v, axis=1, keepdims=True)
        out = estimate_normals(PointCloud(pts), k=10, viewpoint=(0, 0, 0))
        cos = np.sum(out.normals * (-pts / 20.0), axis=1)
        assert cos.min() > 0.98

    def test_collinear_points_give_orthogonal_normal(self):
        pts = np.outer(np.arange(6.0), [1.0, 2.0, 2.0]) / 3.0
        out = estimate_normals(PointCloud(pts), k=5, viewpoint=(0, 0, -10))
        assert np.abs(out.normals @ np.array([1.0, 2.0, 2.0]) / 3.0).max() < 1e-9
        assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0)

    def test_too_few_points(self):
        with pytest.raises(InputError):
            estimate_normals(PointCloud(np.zeros((4, 3))), k=4)

    @given(st.integers(0, 2**31))
    def test_rotation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(-10, 10, (80, 2))
        pts = np.column_stack([xy, 0.02 * (xy**2).sum(axis=1)])
        view = np.array([0.0, 0.0, 50.0])
        T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 10)
        a = estimate_normals(PointCloud(pts), 8, view)
        b = estimate_normals(PointCloud(T.apply(pts)), 8, T.apply(view))
        assert np.allclose(T.apply_vectors(a.normals), b.normals, atol=1e-6)


class TestPointCloud:
    def test_parallel_lengths_checked(self):
        with pytest.raises(InputError):
            PointCloud(np.zeros((3, 3)), labels=[1, 0])

    def test_normals_must_be_unit(self):
        with pytest.raises(InputError):
            PointCloud(np.zeros((1, 3)), normals=[[0, 0, 2.0]])

    def test_voxel_downsample_averages_and_votes(self):
        pts = [[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [0.5, 0.2, 0.2], [5.2, 5.2, 5.2]]
        cloud = PointCloud(pts, labels=[1, 1, 0, 0])
        out = voxel_downsample(cloud, 1.0)
        assert len(out) == 2
        assert np.allclose(out.points[0], [0.3, 0.2, 0.2])
        assert out.labels.tolist() == [1, 0]
