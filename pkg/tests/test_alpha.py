import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from woundscan.alpha import alpha_shape_mesh, tetra_circumradius
from woundscan.errors import EmptyMeshError, InputError
from woundscan.mesh import edge_face_incidence, orientation_consistent
from woundscan.rgbd import PointCloud


def regular_tetrahedron(edge=10.0):
    P = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return P * edge / (2 * np.sqrt(2))


def fibonacci_sphere(n, radius):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return radius * np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def test_circumradius_of_regular_tetrahedron():
    P = regular_tetrahedron(10.0)
    # R = a * sqrt(6) / 4
    assert tetra_circumradius(P, np.array([[0, 1, 2, 3]]))[0] == pytest.approx(10 * np.sqrt(6) / 4)


def test_flat_tetrahedron_has_infinite_radius():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    assert np.isinf(tetra_circumradius(P, np.array([[0, 1, 2, 3]]))[0])


def test_single_tetrahedron_gives_its_four_faces():
    P = regular_tetrahedron(10.0)
    mesh = alpha_shape_mesh(PointCloud(P), alpha=100.0)
    assert mesh.n_faces == 4
    assert {tuple(sorted(f)) for f in mesh.faces} == {(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)}
    # normals point away from the centroid
    c = mesh.vertices.mean(axis=0)
    centres = mesh.vertices[mesh.faces].mean(axis=1)
    assert np.all(np.sum(mesh.face_normals() * (centres - c), axis=1) > 0)


def solid_ball(radius, n_surface):
    """Concentric sampled shells at roughly the surface spacing, plus the centre."""
    h = np.sqrt(4 * np.pi * radius**2 / n_surface)
    shells = [fibonacci_sphere(max(int(n_surface * (r / radius) ** 2), 4), r) for r in np.arange(radius, 0, -h)]
    return np.vstack(shells + [np.zeros((1, 3))])


def test_sphere_is_closed_with_correct_area():
    # surface-only samples would leave only slivers of circumradius ~R
    R = 20.0
    mesh = alpha_shape_mesh(solid_ball(R, 2000), alpha=5.0)
    assert mesh.euler_characteristic() == 2
    _, _, _, counts = edge_face_incidence(mesh.faces)
    assert np.all(counts == 2)
    assert orientation_consistent(mesh.faces)
    assert mesh.area() == pytest.approx(4 * np.pi * R**2, rel=0.03)


def test_tiny_alpha_is_empty():
    with pytest.raises(EmptyMeshError):
        alpha_shape_mesh(regular_tetrahedron(), alpha=1e-9)


def test_input_checks():
    with pytest.raises(InputError):
        alpha_shape_mesh(np.zeros((3, 3)), 5.0)
    with pytest.raises(InputError):
        alpha_shape_mesh(regular_tetrahedron(), 0.0)
    flat = np.column_stack([np.random.default_rng(0).uniform(size=(20, 2)), np.zeros(20)])
    with pytest.raises(InputError):
        alpha_shape_mesh(flat, 5.0)


@given(st.integers(0, 2**31), st.floats(1.0, 4.0), st.floats(1.0, 3.0))
def test_faces_are_delaunay_faces_and_alpha_is_monotone(seed, alpha, factor):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 10, (60, 3))
    tri = Delaunay(P)
    delaunay_faces = {
        tuple(sorted(t[list(c)])) for t in tri.simplices for c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))
    }
    radii = tetra_circumradius(P, tri.simplices)
    small = set(map(tuple, np.sort(tri.simplices[radii < alpha], axis=1)))
    large = set(map(tuple, np.sort(tri.simplices[radii < alpha * factor], axis=1)))
    assert small <= large
    try:
        mesh = alpha_shape_mesh(P, alpha)
    except EmptyMeshError:
        assert not small
        return
    # map mesh vertices back to input indices
    index = {tuple(p): i for i, p in enumerate(P)}
    for f in mesh.faces:
        key = tuple(sorted(index[tuple(mesh.vertices[v])] for v in f))
        assert key in delaunay_faces
