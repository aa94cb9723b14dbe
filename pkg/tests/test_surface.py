import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dsmatch.errors import DegenerateGridError
from dsmatch.geometry import SimilarityTransform, apply_transform
from dsmatch.surface import (
    SurfaceMesh,
    build_index,
    closest_on_triangles,
    closest_point,
    signed_distance,
    signed_distances,
)
from dsmatch.synth import SceneSpec, brute_force_closest_many, make_scene


def horizontal_square():
    """Two coplanar triangles covering [0,2]x[0,2] at z=0."""
    vertices = np.array([
        [0.0, 0.0, 0.0],
        [2.0, 0.0, 0.0],
        [2.0, 2.0, 0.0],
        [0.0, 2.0, 0.0],
    ])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return SurfaceMesh.from_arrays(vertices, triangles)


def test_empty_mesh_raises():
    with pytest.raises(DegenerateGridError):
        SurfaceMesh.from_arrays(np.zeros((3, 3)), np.empty((0, 3), dtype=int))


def test_zero_area_triangle_rejected():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        SurfaceMesh.from_arrays(vertices, np.array([[0, 1, 2]]))


def test_vertical_projection_onto_interior():
    mesh = horizontal_square()
    index = build_index(mesh)
    fp = closest_point(index, [0.8, 0.4, 1.5])
    assert fp is not None
    assert_allclose(fp.point, [0.8, 0.4, 0.0], atol=1e-12)
    assert fp.distance == pytest.approx(1.5)
    assert not fp.on_boundary


def test_cutoff_returns_none():
    index = build_index(horizontal_square())
    assert closest_point(index, [1.0, 1.0, 25.0], max_dist=10.0) is None


def test_two_triangle_index_matches_brute_force(rng):
    mesh = horizontal_square()
    index = build_index(mesh)
    queries = rng.uniform(-1.0, 3.0, size=(200, 3))
    feet = index.query(queries, max_dist=100.0)
    oracle = brute_force_closest_many(mesh, queries)
    for i, fp in enumerate(oracle):
        assert feet.found[i]
        assert abs(feet.distance[i] - fp.distance) < 1e-9
        assert feet.triangle_id[i] == fp.triangle_id


def test_index_matches_brute_force_on_terrain(rng):
    mesh, _ = make_scene(
        SceneSpec(kind="ridged-terrain", extent_x=12.0, extent_y=12.0, gsd=0.5, amplitude=2.0, seed=5)
    )
    assert mesh.n_triangles >= 1000
    index = build_index(mesh)
    queries = np.column_stack([
        rng.uniform(-1.0, 13.0, 2000),
        rng.uniform(-1.0, 13.0, 2000),
        rng.uniform(-4.0, 6.0, 2000),
    ])
    feet = index.query(queries, max_dist=50.0)
    oracle = brute_force_closest_many(mesh, queries)
    for i, fp in enumerate(oracle):
        assert feet.found[i]
        assert abs(feet.distance[i] - fp.distance) < 1e-9
        assert np.linalg.norm(feet.point[i] - fp.point) < 1e-9


def test_tie_breaks_to_lowest_triangle_id():
    # mirror-image triangles about the x = 0 plane: for a query on that
    # plane the two distances are bit-identical (mirrored IEEE ops), so
    # the lower id must win
    vertices = np.array([
        [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.0, 1.0],
        [-1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [-2.0, 0.0, 1.0],
    ])
    triangles = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = SurfaceMesh.from_arrays(vertices, triangles)
    index = build_index(mesh)
    for q in ([0.0, 0.0, 0.0], [0.0, 0.3, 0.2]):
        fp = closest_point(index, q, max_dist=50.0)
        oracle = brute_force_closest_many(mesh, np.array([q]))[0]
        assert fp.triangle_id == 0
        assert oracle.triangle_id == 0


def test_signed_distance_zero_on_surface():
    index = build_index(horizontal_square())
    fp = closest_point(index, [0.5, 0.5, 0.0])
    assert signed_distance([0.5, 0.5, 0.0], fp) == 0.0


def test_signed_distance_above_horizontal_facet():
    index = build_index(horizontal_square())
    q = [0.5, 0.5, 0.5]
    fp = closest_point(index, q)
    assert signed_distance(q, fp) == pytest.approx(0.5)


def test_signed_distance_below_tilted_facet():
    # plane tilted 30 degrees from horizontal about the y axis:
    # z = tan(30) * x, unit normal (-sin30, 0, cos30)
    tan30 = math.tan(math.pi / 6)
    vertices = np.array([
        [0.0, -5.0, 0.0],
        [4.0, -5.0, 4.0 * tan30],
        [0.0, 5.0, 0.0],
        [4.0, 5.0, 4.0 * tan30],
    ])
    mesh = SurfaceMesh.from_arrays(vertices, np.array([[0, 1, 3], [0, 3, 2]]))
    index = build_index(mesh)
    normal = np.array([-math.sin(math.pi / 6), 0.0, math.cos(math.pi / 6)])
    surface_point = np.array([2.0, 0.0, 2.0 * tan30])
    q = surface_point - 0.3 * normal
    fp = closest_point(index, q)
    assert signed_distance(q, fp) == pytest.approx(-0.3, abs=1e-12)


def test_boundary_flags():
    mesh = horizontal_square()
    index = build_index(mesh)
    # interior foot
    assert not closest_point(index, [1.2, 0.7, 1.0]).on_boundary
    # query beyond the hull projects onto a boundary edge
    assert closest_point(index, [1.0, -0.5, 0.2]).on_boundary
    # query above a corner vertex
    assert closest_point(index, [-0.5, -0.5, 0.2]).on_boundary
    # the shared diagonal of the square is interior: a foot on it is not boundary
    assert not closest_point(index, [1.0, 1.0, 0.4]).on_boundary


def test_foot_point_barycentric_validity(rng):
    mesh, _ = make_scene(
        SceneSpec(kind="building-blocks", extent_x=10.0, extent_y=10.0, gsd=0.5, amplitude=3.0, seed=2)
    )
    a, b, c = mesh.corners()
    queries = rng.uniform(-1.0, 11.0, size=(500, 3))
    index = build_index(mesh)
    feet = index.query(queries, max_dist=50.0)
    tri = feet.triangle_id
    foot, v, w = closest_on_triangles(a[tri], b[tri], c[tri], queries)
    # same winner triangle implies the same foot
    assert np.abs(foot - feet.point).max() < 1e-12
    u = 1.0 - v - w
    for coord in (u, v, w):
        assert (coord >= -1e-9).all() and (coord <= 1.0 + 1e-9).all()


def test_distance_invariant_under_rigid_motion(rng):
    mesh, _ = make_scene(
        SceneSpec(kind="ridged-terrain", extent_x=8.0, extent_y=8.0, gsd=0.5, amplitude=1.0, seed=9)
    )
    index = build_index(mesh)
    queries = rng.uniform(0.0, 8.0, size=(100, 3))
    feet = index.query(queries, max_dist=50.0)

    motion = SimilarityTransform(3.0, -2.0, 1.0, 0.2, -0.1, 0.5, 1.0)
    moved_vertices = apply_transform(motion, mesh.vertices)
    moved_mesh = SurfaceMesh.from_arrays(moved_vertices, mesh.triangles)
    moved_index = build_index(moved_mesh)
    moved_feet = moved_index.query(apply_transform(motion, queries), max_dist=50.0)
    assert np.abs(feet.distance - moved_feet.distance).max() < 1e-9


def test_foot_is_true_minimizer(rng):
    mesh, _ = make_scene(
        SceneSpec(kind="ridged-terrain", extent_x=8.0, extent_y=8.0, gsd=0.5, amplitude=1.0, seed=9)
    )
    index = build_index(mesh)
    a, b, c = mesh.corners()
    # random points sampled on the mesh itself
    tri = rng.integers(0, mesh.n_triangles, size=1000)
    r1 = rng.random(1000)
    r2 = rng.random(1000)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    samples = a[tri] + r1[:, None] * (b[tri] - a[tri]) + r2[:, None] * (c[tri] - a[tri])

    q = np.array([4.1, 3.7, 2.5])
    fp = closest_point(index, q, max_dist=50.0)
    sampled_min = np.linalg.norm(samples - q, axis=1).min()
    assert sampled_min >= fp.distance - 1e-9


def test_signed_distances_nan_for_missing():
    index = build_index(horizontal_square())
    q = np.array([[1.0, 1.0, 0.5], [1.0, 1.0, 30.0]])
    feet = index.query(q, max_dist=5.0)
    res = signed_distances(q, feet)
    assert res[0] == pytest.approx(0.5)
    assert np.isnan(res[1])
