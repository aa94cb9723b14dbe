"""Deterministic synthetic scenes and brute-force oracles.

Desk-scale stand-ins for real survey data: a heightfield scene is built
on a fully occupied grid (so the sample cloud is exactly the grid's
stored points), perturbed by a known transform, Gaussian noise and
labeled vertical blunders, and then registered back - which must
recover the injected transform.

All randomness flows from explicit seeds through numpy Generators; no
global random state is touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGridError
from .geometry import IDENTITY, SimilarityTransform, apply_transform, invert, validate_cloud
from .raster import GridSpec, RasterGrid, extract_cloud, mesh_from_grid
from .surface import FootPoint, SurfaceMesh, closest_on_triangles, foot_on_boundary

SCENE_KINDS = ("plane", "ridged-terrain", "building-blocks")

_PAIR_CHUNK = 1 << 22


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene description; identical specs yield identical scenes."""

    kind: str = "ridged-terrain"
    extent_x: float = 50.0
    extent_y: float = 50.0
    gsd: float = 0.5
    amplitude: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        if self.extent_x <= 0.0 or self.extent_y <= 0.0:
            raise ValueError("extents must be positive")
        if self.gsd <= 0.0:
            raise ValueError("gsd must be positive")


@dataclass(frozen=True)
class PerturbationSpec:
    """How to corrupt a clean sample cloud before registration."""

    transform: SimilarityTransform = IDENTITY
    noise_sigma: float = 0.0
    blunder_fraction: float = 0.0
    blunder_magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.blunder_fraction <= 1.0:
            raise ValueError("blunder_fraction must be in [0, 1]")
        if self.blunder_magnitude < 0.0:
            raise ValueError("blunder_magnitude must be non-negative")


def _heights(kind: str, x: np.ndarray, y: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    if kind == "plane":
        return spec.amplitude * 0.5 * (x / spec.extent_x + y / spec.extent_y)
    if kind == "ridged-terrain":
        z = np.zeros_like(x)
        for _ in range(4):
            fx = rng.uniform(0.5, 3.0)
            fy = rng.uniform(0.5, 3.0)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            z += np.sin(2.0 * math.pi * (fx * x / spec.extent_x + fy * y / spec.extent_y) + phase)
        peak = float(np.abs(z).max())
        return spec.amplitude * z / peak if peak > 0.0 else z
    # building-blocks: gently undulating ground with flat, rotated
    # rectangular roofs. The steep block sides exercise roof-edge
    # behavior; the ground relief keeps planimetric information spread
    # over the whole scene instead of concentrating it on wall slivers.
    z = np.zeros_like(x)
    for direction in range(4):
        # spread the wave directions so ground slopes constrain the
        # planimetric parameters in every direction
        base_angle = 0.25 * math.pi * direction + rng.uniform(-0.2, 0.2)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        fx = freq * math.cos(base_angle)
        fy = freq * math.sin(base_angle)
        z += np.sin(2.0 * math.pi * (fx * x / spec.extent_x + fy * y / spec.extent_y) + phase)
    z *= 0.12 * spec.amplitude
    n_blocks = max(3, int(round(spec.extent_x * spec.extent_y / 400.0)))
    for _ in range(n_blocks):
        hw = rng.uniform(0.04, 0.12) * spec.extent_x
        hh = rng.uniform(0.04, 0.12) * spec.extent_y
        cx = rng.uniform(0.15 * spec.extent_x, 0.85 * spec.extent_x)
        cy = rng.uniform(0.15 * spec.extent_y, 0.85 * spec.extent_y)
        theta = rng.uniform(0.0, math.pi)
        height = rng.uniform(0.4, 1.0) * spec.amplitude
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        du = (x - cx) * cos_t + (y - cy) * sin_t
        dv = -(x - cx) * sin_t + (y - cy) * cos_t
        inside = (np.abs(du) <= hw) & (np.abs(dv) <= hh)
        z = np.where(inside, np.maximum(z, height), z)
    return z


def make_grid(spec: SceneSpec) -> RasterGrid:
    """Fully occupied scene grid with sample points at cell centers."""
    ncols = max(2, int(round(spec.extent_x / spec.gsd)))
    nrows = max(2, int(round(spec.extent_y / spec.gsd)))
    gspec = GridSpec(0.0, 0.0, spec.gsd, ncols, nrows)
    cols, rows = np.meshgrid(np.arange(ncols), np.arange(nrows))
    x = (cols + 0.5) * spec.gsd
    y = (rows + 0.5) * spec.gsd
    rng = np.random.default_rng(spec.seed)
    z = _heights(spec.kind, x, y, spec, rng)
    source = np.arange(ncols * nrows, dtype=np.int64).reshape(nrows, ncols)
    return RasterGrid(gspec, x, y, z, source, 0)


def make_scene(spec: SceneSpec) -> tuple[SurfaceMesh, np.ndarray]:
    """Deterministic reference mesh plus a cloud sampled exactly on it."""
    grid = make_grid(spec)
    return mesh_from_grid(grid), extract_cloud(grid)


def sample_surface(
    mesh: SurfaceMesh, n: int, seed: int, min_normal_z: float = 0.0
) -> np.ndarray:
    """n points drawn area-uniformly on the mesh facets (exactly on it).

    ``min_normal_z`` restricts sampling to facets at least that
    up-facing, which mimics nadir-looking measurements: a photogrammetric
    DSM never samples verticals, so test clouds should not either.
    """
    rng = np.random.default_rng(seed)
    a, b, c = mesh.corners()
    weights = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    weights = weights * (mesh.normals[:, 2] >= min_normal_z)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("no facets satisfy the normal constraint")
    tri = rng.choice(len(weights), size=n, p=weights / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    return a[tri] + r1[:, None] * (b[tri] - a[tri]) + r2[:, None] * (c[tri] - a[tri])


def perturb(points: np.ndarray, spec: PerturbationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a clean cloud; returns (cloud, is_blunder labels).

    The inverse of spec.transform is applied first, so registering the
    output against the original surface must recover spec.transform.
    Noise is isotropic Gaussian. Blunders displace a fixed-size subset
    (round(fraction * n)) along z by magnitudes drawn uniformly from
    [magnitude/10, magnitude] with random sign - bounded away from zero
    so that labeled blunders are actually separable from noise.
    """
    points = validate_cloud(points)
    n = len(points)
    out = apply_transform(invert(spec.transform), points)
    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma > 0.0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=(n, 3))
    labels = np.zeros(n, dtype=bool)
    n_blunders = int(round(spec.blunder_fraction * n))
    if n_blunders > 0:
        chosen = rng.choice(n, size=n_blunders, replace=False)
        labels[chosen] = True
        magnitude = rng.uniform(0.1 * spec.blunder_magnitude, spec.blunder_magnitude, size=n_blunders)
        sign = rng.choice([-1.0, 1.0], size=n_blunders)
        out[chosen, 2] += sign * magnitude
    return out, labels


def brute_force_closest(mesh: SurfaceMesh, q) -> FootPoint:
    """Exhaustive closest-point scan over all facets (index oracle).

    Same tie rule as the indexed query: on exactly equal distances the
    lowest triangle id wins.
    """
    feet = brute_force_closest_many(mesh, np.asarray(q, dtype=float).reshape(1, 3))
    return feet[0]


def brute_force_closest_many(mesh: SurfaceMesh, queries: np.ndarray) -> list[FootPoint]:
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    t = mesh.n_triangles
    if t == 0:
        raise DegenerateGridError("empty mesh")
    a, b, c = mesh.corners()
    results: list[FootPoint] = []
    q_per_chunk = max(1, _PAIR_CHUNK // t)
    tri_ids = np.arange(t)
    for start in range(0, len(queries), q_per_chunk):
        qc = queries[start:start + q_per_chunk]
        m = len(qc)
        pair_q = np.repeat(np.arange(m), t)
        pair_t = np.tile(tri_ids, m)
        foot, v, w = closest_on_triangles(a[pair_t], b[pair_t], c[pair_t], qc[pair_q])
        dist = np.linalg.norm(qc[pair_q] - foot, axis=1).reshape(m, t)
        best = np.argmin(dist, axis=1)  # argmin takes the first (lowest id) on ties
        flat = np.arange(m) * t + best
        boundary = foot_on_boundary(mesh, best.astype(np.int64), v[flat], w[flat])
        for i in range(m):
            tid = int(best[i])
            results.append(
                FootPoint(
                    point=foot[flat[i]],
                    normal=mesh.normals[tid],
                    triangle_id=tid,
                    distance=float(dist[i, tid]),
                    on_boundary=bool(boundary[i]),
                )
            )
    return results
