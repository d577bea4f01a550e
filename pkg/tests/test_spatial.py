import numpy as np
import pytest

from longisurf import SurfaceIndex, closest_point_on_triangles
from longisurf.spatial import _closest_point_on_triangles_numpy


def test_point_on_vertex_distance_zero(ico_cache):
    mesh = ico_cache(2)
    index = SurfaceIndex(mesh)
    d, f, cp = index.nearest_point(mesh.vertices[17])
    assert d == 0.0
    np.testing.assert_allclose(cp, mesh.vertices[17], atol=1e-15)


def test_center_of_icosphere_matches_bruteforce(ico_cache):
    mesh = ico_cache(3)
    index = SurfaceIndex(mesh)
    d, _, _ = index.nearest_point([0.0, 0.0, 0.0])
    # brute force: plane distance to every face (center projects inside
    # each face of a convex polyhedron centered at the origin)
    tris = mesh.triangles()
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    plane = np.abs(np.einsum("ij,ij->i", tris[:, 0], n))
    assert d == pytest.approx(plane.min(), abs=1e-14)
    assert d < 1.0  # strictly inside the sphere


def test_indexed_vs_exhaustive_exact(ico_cache):
    mesh = ico_cache(3)
    index = SurfaceIndex(mesh)
    rng = np.random.default_rng(11)
    pts = np.concatenate(
        [
            rng.uniform(-1.4, 1.4, size=(1500, 3)),
            mesh.vertices[rng.integers(0, mesh.n_vertices, 200)]
            + rng.normal(scale=1e-3, size=(200, 3)),
        ]
    )
    d1, f1, p1 = index.nearest(pts)
    d2, f2, p2 = index.nearest_exhaustive(pts)
    assert np.array_equal(d1, d2)
    assert np.array_equal(f1, f2)
    assert np.array_equal(p1, p2)


def test_chunking_does_not_change_results(ico_cache):
    mesh = ico_cache(2)
    index = SurfaceIndex(mesh)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-2, 2, size=(500, 3))
    d1, f1, p1 = index.nearest(pts, chunk=64)
    d2, f2, p2 = index.nearest(pts, chunk=100000)
    assert np.array_equal(d1, d2)
    assert np.array_equal(f1, f2)
    assert np.array_equal(p1, p2)


def test_closest_point_regions():
    tri = np.array([[[0.0, 0, 0], [2.0, 0, 0], [0.0, 2, 0]]])
    # interior: foot of perpendicular
    cp = closest_point_on_triangles(np.array([[0.5, 0.5, 3.0]]), tri)
    np.testing.assert_allclose(cp[0], [0.5, 0.5, 0.0], atol=1e-15)
    # beyond vertex A
    cp = closest_point_on_triangles(np.array([[-1.0, -1.0, 0.5]]), tri)
    np.testing.assert_allclose(cp[0], [0, 0, 0], atol=1e-15)
    # beyond edge AB
    cp = closest_point_on_triangles(np.array([[1.0, -2.0, 0.0]]), tri)
    np.testing.assert_allclose(cp[0], [1, 0, 0], atol=1e-15)
    # beyond hypotenuse
    cp = closest_point_on_triangles(np.array([[2.0, 2.0, 0.0]]), tri)
    np.testing.assert_allclose(cp[0], [1, 1, 0], atol=1e-12)


def test_jitted_kernel_matches_numpy_reference():
    rng = np.random.default_rng(23)
    pts = rng.standard_normal((4000, 3)) * 2
    tris = rng.standard_normal((4000, 3, 3))
    a = closest_point_on_triangles(pts, tris)
    b = _closest_point_on_triangles_numpy(pts, tris)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_distances_nonnegative_and_zero_on_surface(ico_cache):
    mesh = ico_cache(2)
    index = SurfaceIndex(mesh)
    d, _, _ = index.nearest(mesh.vertices)
    assert (d >= 0).all()
    assert d.max() == 0.0
