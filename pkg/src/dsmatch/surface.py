"""Triangulated reference surface with exact closest-point queries.

The surface is the matching template: queries return the true nearest
point on the triangle mesh (foot point), the owning facet's upward unit
normal, and a boundary flag used to classify correspondences whose real
nearest surface point likely lies outside the modeled extent.

Closest-point search runs on a bounding-volume hierarchy over the
triangles with branch-and-bound traversal; every visited facet is
tested with the exact point-to-triangle computation, so query results
(including the lowest-triangle-id tie rule) match an exhaustive scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateGridError

MIN_TRIANGLE_AREA = 1e-12
BARYCENTRIC_TOL = 1e-9
DEFAULT_MAX_DIST = 10.0

_LEAF_SIZE = 8


@dataclass(frozen=True)
class SurfaceMesh:
    """Immutable triangle mesh with per-facet upward unit normals.

    vertices: (v, 3) float64; triangles: (t, 3) int64 vertex indices;
    normals: (t, 3) unit vectors with normal_z > 0. Boundary structure
    (edges used by exactly one triangle) is precomputed for foot-point
    classification.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    tri_edge_boundary: np.ndarray   # (t, 3) bool for edges (v0,v1), (v1,v2), (v2,v0)
    vertex_boundary: np.ndarray     # (v,) bool
    boundary_edges: np.ndarray      # (e, 2) sorted vertex pairs

    @classmethod
    def from_arrays(cls, vertices: np.ndarray, triangles: np.ndarray) -> "SurfaceMesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must have shape (v, 3), got {vertices.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError(f"triangles must have shape (t, 3), got {triangles.shape}")
        if triangles.size == 0:
            raise DegenerateGridError("mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise ValueError("triangle vertex index out of range")

        a = vertices[triangles[:, 0]]
        b = vertices[triangles[:, 1]]
        c = vertices[triangles[:, 2]]
        cross = np.cross(b - a, c - a)
        norm = np.linalg.norm(cross, axis=1)
        if (0.5 * norm <= MIN_TRIANGLE_AREA).any():
            raise ValueError("mesh contains zero-area triangles")
        normals = cross / norm[:, None]
        flip = normals[:, 2] < 0.0
        normals[flip] = -normals[flip]
        if (normals[:, 2] <= 0.0).any():
            raise ValueError("mesh contains vertical triangles (normal_z = 0)")

        tri_edge_boundary, vertex_boundary, boundary_edges = _boundary_structure(
            triangles, len(vertices)
        )
        for arr in (vertices, triangles, normals, tri_edge_boundary, vertex_boundary, boundary_edges):
            arr.setflags(write=False)
        return cls(vertices, triangles, normals, tri_edge_boundary, vertex_boundary, boundary_edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-triangle vertex arrays (a, b, c), each (t, 3)."""
        return (
            self.vertices[self.triangles[:, 0]],
            self.vertices[self.triangles[:, 1]],
            self.vertices[self.triangles[:, 2]],
        )


def _boundary_structure(triangles: np.ndarray, n_vertices: int):
    t = len(triangles)
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    edges_sorted = np.sort(edges, axis=1)
    uniq, inverse, counts = np.unique(
        edges_sorted, axis=0, return_inverse=True, return_counts=True
    )
    on_boundary_flat = counts[inverse] == 1
    tri_edge_boundary = on_boundary_flat.reshape(3, t).T.copy()
    boundary_edges = uniq[counts == 1]
    vertex_boundary = np.zeros(n_vertices, dtype=bool)
    vertex_boundary[boundary_edges.ravel()] = True
    return tri_edge_boundary, vertex_boundary, boundary_edges


def closest_on_triangles(a, b, c, q):
    """Closest point on each triangle (a[i], b[i], c[i]) to q[i].

    Region classification against vertices, edges and interior
    (Ericson's method). Returns (foot, v, w) where
    foot = a + v*(b-a) + w*(c-a) and (1-v-w, v, w) are the barycentric
    coordinates of the foot.
    """
    ab = b - a
    ac = c - a
    ap = q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    n = len(q)
    v = np.zeros(n)
    w = np.zeros(n)
    remain = ~((d1 <= 0.0) & (d2 <= 0.0))  # vertex A region keeps v = w = 0

    bp = q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    is_b = remain & (d3 >= 0.0) & (d4 <= d3)
    v[is_b] = 1.0
    remain &= ~is_b

    vc = d1 * d4 - d3 * d2
    sel = np.nonzero(remain & (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0))[0]
    v[sel] = d1[sel] / (d1[sel] - d3[sel])
    remain[sel] = False

    cp = q - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    is_c = remain & (d6 >= 0.0) & (d5 <= d6)
    w[is_c] = 1.0
    remain &= ~is_c

    vb = d5 * d2 - d1 * d6
    sel = np.nonzero(remain & (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0))[0]
    w[sel] = d2[sel] / (d2[sel] - d6[sel])
    remain[sel] = False

    va = d3 * d6 - d5 * d4
    sel = np.nonzero(remain & (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0))[0]
    t_bc = (d4[sel] - d3[sel]) / ((d4[sel] - d3[sel]) + (d5[sel] - d6[sel]))
    v[sel] = 1.0 - t_bc
    w[sel] = t_bc
    remain[sel] = False

    sel = np.nonzero(remain)[0]
    denom = va[sel] + vb[sel] + vc[sel]
    v[sel] = vb[sel] / denom
    w[sel] = vc[sel] / denom

    foot = a + v[:, None] * ab + w[:, None] * ac
    return foot, v, w


@njit(cache=True)
def _tri_dist2(ax, ay, az, bx, by, bz, cx, cy, cz, qx, qy, qz):
    """Squared distance from a point to a triangle (Ericson regions)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = qx - ax, qy - ay, qz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = qx - bx, qy - by, qz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        ex, ey, ez = apx - t * abx, apy - t * aby, apz - t * abz
        return ex * ex + ey * ey + ez * ez
    cpx, cpy, cpz = qx - cx, qy - cy, qz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        ex, ey, ez = apx - t * acx, apy - t * acy, apz - t * acz
        return ex * ex + ey * ey + ez * ez
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bcx, bcy, bcz = cx - bx, cy - by, cz - bz
        ex, ey, ez = bpx - t * bcx, bpy - t * bcy, bpz - t * bcz
        return ex * ex + ey * ey + ez * ez
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    ex = apx - v * abx - w * acx
    ey = apy - v * aby - w * acy
    ez = apz - v * abz - w * acz
    return ex * ex + ey * ey + ez * ez


@njit(cache=True)
def _bvh_closest(
    bb_min, bb_max, child_left, child_right, leaf_start, leaf_count, tri_order,
    ta, tb, tc, q, max_dist,
):
    """Nearest triangle per query within max_dist; -1 when none.

    Exact ties on squared distance resolve to the lowest triangle id:
    sibling subtrees and leaf facets are only skipped when strictly
    farther than the incumbent, and an equal-distance facet replaces the
    incumbent only with a lower id.
    """
    n = q.shape[0]
    out_d2 = np.empty(n)
    out_tri = np.full(n, -1, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    limit = max_dist * max_dist
    for i in range(n):
        qx, qy, qz = q[i, 0], q[i, 1], q[i, 2]
        best_d2 = limit
        best_tri = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            dx = max(max(bb_min[node, 0] - qx, qx - bb_max[node, 0]), 0.0)
            dy = max(max(bb_min[node, 1] - qy, qy - bb_max[node, 1]), 0.0)
            dz = max(max(bb_min[node, 2] - qz, qz - bb_max[node, 2]), 0.0)
            if dx * dx + dy * dy + dz * dz > best_d2:
                continue
            left = child_left[node]
            if left < 0:
                for j in range(leaf_start[node], leaf_start[node] + leaf_count[node]):
                    t = tri_order[j]
                    d2 = _tri_dist2(
                        ta[t, 0], ta[t, 1], ta[t, 2],
                        tb[t, 0], tb[t, 1], tb[t, 2],
                        tc[t, 0], tc[t, 1], tc[t, 2],
                        qx, qy, qz,
                    )
                    if d2 < best_d2 or (d2 == best_d2 and (best_tri < 0 or t < best_tri)):
                        best_d2 = d2
                        best_tri = t
            else:
                right = child_right[node]
                lx = max(max(bb_min[left, 0] - qx, qx - bb_max[left, 0]), 0.0)
                ly = max(max(bb_min[left, 1] - qy, qy - bb_max[left, 1]), 0.0)
                lz = max(max(bb_min[left, 2] - qz, qz - bb_max[left, 2]), 0.0)
                dl = lx * lx + ly * ly + lz * lz
                rx = max(max(bb_min[right, 0] - qx, qx - bb_max[right, 0]), 0.0)
                ry = max(max(bb_min[right, 1] - qy, qy - bb_max[right, 1]), 0.0)
                rz = max(max(bb_min[right, 2] - qz, qz - bb_max[right, 2]), 0.0)
                dr = rx * rx + ry * ry + rz * rz
                # push the farther child first so the nearer pops first;
                # on equal box distance keep the left (lower ids) first
                if dl <= dr:
                    if dr <= best_d2:
                        stack[top] = right
                        top += 1
                    if dl <= best_d2:
                        stack[top] = left
                        top += 1
                else:
                    if dl <= best_d2:
                        stack[top] = left
                        top += 1
                    if dr <= best_d2:
                        stack[top] = right
                        top += 1
        out_d2[i] = best_d2
        out_tri[i] = best_tri
    return out_d2, out_tri


@dataclass(frozen=True)
class FootPoint:
    """Nearest point on the mesh to a single query."""

    point: np.ndarray
    normal: np.ndarray
    triangle_id: int
    distance: float
    on_boundary: bool


@dataclass
class FootPoints:
    """Batched foot-point query results (arrays indexed like the queries)."""

    found: np.ndarray         # (n,) bool
    point: np.ndarray         # (n, 3), undefined rows where not found
    normal: np.ndarray        # (n, 3)
    triangle_id: np.ndarray   # (n,) int64, -1 where not found
    distance: np.ndarray      # (n,) unsigned meters, inf where not found
    on_boundary: np.ndarray   # (n,) bool

    def __len__(self) -> int:
        return len(self.found)


class SpatialIndex:
    """Exact closest-triangle index: median-split AABB tree over facets."""

    def __init__(self, mesh: SurfaceMesh):
        if mesh.n_triangles == 0:
            raise DegenerateGridError("cannot index an empty mesh")
        self.mesh = mesh
        self._a, self._b, self._c = mesh.corners()
        tri_min = np.minimum(np.minimum(self._a, self._b), self._c)
        tri_max = np.maximum(np.maximum(self._a, self._b), self._c)
        centroids = (self._a + self._b + self._c) / 3.0

        n = mesh.n_triangles
        order = np.arange(n, dtype=np.int64)
        max_nodes = 4 * max(1, n // _LEAF_SIZE) + 8
        bb_min = np.empty((max_nodes, 3))
        bb_max = np.empty((max_nodes, 3))
        child_left = np.full(max_nodes, -1, dtype=np.int64)
        child_right = np.full(max_nodes, -1, dtype=np.int64)
        leaf_start = np.zeros(max_nodes, dtype=np.int64)
        leaf_count = np.zeros(max_nodes, dtype=np.int64)
        n_nodes = 0

        # iterative median-split build; stack entries carry the segment
        # and the parent slot to patch once the node index is known
        stack = [(0, n, -1, False)]
        while stack:
            lo, hi, parent, is_right = stack.pop()
            idx = n_nodes
            n_nodes += 1
            seg = order[lo:hi]
            bb_min[idx] = tri_min[seg].min(axis=0)
            bb_max[idx] = tri_max[seg].max(axis=0)
            if parent >= 0:
                if is_right:
                    child_right[parent] = idx
                else:
                    child_left[parent] = idx
            if hi - lo <= _LEAF_SIZE:
                leaf_start[idx] = lo
                leaf_count[idx] = hi - lo
                continue
            cen = centroids[seg]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            mid = (hi - lo) // 2
            part = np.argpartition(cen[:, axis], mid)
            order[lo:hi] = seg[part]
            stack.append((lo + mid, hi, idx, True))
            stack.append((lo, lo + mid, idx, False))

        self._bb_min = bb_min[:n_nodes].copy()
        self._bb_max = bb_max[:n_nodes].copy()
        self._child_left = child_left[:n_nodes].copy()
        self._child_right = child_right[:n_nodes].copy()
        self._leaf_start = leaf_start[:n_nodes].copy()
        self._leaf_count = leaf_count[:n_nodes].copy()
        self._order = order

    def query(self, points: np.ndarray, max_dist: float = DEFAULT_MAX_DIST, workers: int = 1) -> FootPoints:
        """Foot points for an (n, 3) query array.

        A query is "found" when the nearest facet lies within max_dist.
        Exact ties between facets resolve to the lowest triangle id.
        Results are element-wise independent, hence identical for any
        ``workers`` setting.
        """
        if max_dist <= 0.0:
            raise ValueError("max_dist must be positive")
        q = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        n = len(q)
        _, tri = _bvh_closest(
            self._bb_min, self._bb_max, self._child_left, self._child_right,
            self._leaf_start, self._leaf_count, self._order,
            self._a, self._b, self._c, q, float(max_dist),
        )
        out = FootPoints(
            found=tri >= 0,
            point=np.full((n, 3), np.nan),
            normal=np.full((n, 3), np.nan),
            triangle_id=tri,
            distance=np.full(n, np.inf),
            on_boundary=np.zeros(n, dtype=bool),
        )
        sel = np.nonzero(out.found)[0]
        if len(sel):
            t = tri[sel]
            foot, v, w = closest_on_triangles(self._a[t], self._b[t], self._c[t], q[sel])
            out.point[sel] = foot
            out.normal[sel] = self.mesh.normals[t]
            out.distance[sel] = np.linalg.norm(q[sel] - foot, axis=1)
            out.on_boundary[sel] = foot_on_boundary(self.mesh, t, v, w)
        return out


def foot_on_boundary(mesh: SurfaceMesh, tri: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Whether feet with barycentric (1-v-w, v, w) on triangles ``tri``
    lie on a boundary edge or boundary vertex of the mesh."""
    u = 1.0 - v - w
    teb = mesh.tri_edge_boundary[tri]
    on_ab = w <= BARYCENTRIC_TOL
    on_bc = u <= BARYCENTRIC_TOL
    on_ca = v <= BARYCENTRIC_TOL
    flags = (on_ab & teb[:, 0]) | (on_bc & teb[:, 1]) | (on_ca & teb[:, 2])
    # a foot at a vertex can touch the boundary through an edge of a
    # neighboring triangle, so check the vertex flag too
    verts = mesh.triangles[tri]
    vb = mesh.vertex_boundary
    at_a = (v <= BARYCENTRIC_TOL) & (w <= BARYCENTRIC_TOL)
    at_b = (v >= 1.0 - BARYCENTRIC_TOL) & (w <= BARYCENTRIC_TOL)
    at_c = (w >= 1.0 - BARYCENTRIC_TOL) & (v <= BARYCENTRIC_TOL)
    flags |= at_a & vb[verts[:, 0]]
    flags |= at_b & vb[verts[:, 1]]
    flags |= at_c & vb[verts[:, 2]]
    return flags


def build_index(mesh: SurfaceMesh) -> SpatialIndex:
    """Build the immutable closest-triangle acceleration structure."""
    return SpatialIndex(mesh)


def closest_point(index: SpatialIndex, q, max_dist: float = DEFAULT_MAX_DIST) -> FootPoint | None:
    """Single-query convenience wrapper; None when nothing lies within max_dist."""
    fp = index.query(np.asarray(q, dtype=float).reshape(1, 3), max_dist=max_dist)
    if not fp.found[0]:
        return None
    return FootPoint(
        point=fp.point[0],
        normal=fp.normal[0],
        triangle_id=int(fp.triangle_id[0]),
        distance=float(fp.distance[0]),
        on_boundary=bool(fp.on_boundary[0]),
    )


def signed_distances(q: np.ndarray, feet: FootPoints) -> np.ndarray:
    """Signed point-to-mesh distances: positive above the surface.

    Magnitude is the Euclidean distance to the foot point; the sign is
    taken from the side of the owning facet (normals point up). Rows
    without a foot point come back NaN.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    res = np.full(len(q), np.nan)
    sel = feet.found
    side = np.einsum("ij,ij->i", q[sel] - feet.point[sel], feet.normal[sel])
    res[sel] = np.where(side >= 0.0, 1.0, -1.0) * feet.distance[sel]
    return res


def signed_distance(q, foot: FootPoint) -> float:
    """Signed distance of a single query against its foot point."""
    q = np.asarray(q, dtype=float)
    diff = q - foot.point
    side = float(diff @ foot.normal)
    mag = float(np.linalg.norm(diff))
    return mag if side >= 0.0 else -mag
