"""Z-buffer extraction of the upper surface layer onto a fixed-GSD grid.

Multi-stereo matchers produce multi-layer point clouds (ground visible
under canopy in some stereo pairs). Gridding keeps, per cell, the
highest point only - and stores that point's original x, y, z so that
downstream comparisons are made against real measurements, never cell
centers.

Cell membership uses origin-inclusive half-open intervals
[x0 + i*gsd, x0 + (i+1)*gsd). Ties on equal z resolve to the lowest
input index, which makes the reduction associative: chunked or threaded
execution is bit-identical to sequential.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGridError
from .geometry import validate_cloud
from .surface import MIN_TRIANGLE_AREA, SurfaceMesh

DEFAULT_GSD = 0.10

_RASTER_CHUNK = 1 << 18


@dataclass(frozen=True)
class GridSpec:
    """Fixed-GSD grid footprint: lower-left corner, cell size, extent in cells."""

    origin_x: float
    origin_y: float
    gsd: float
    ncols: int
    nrows: int

    def __post_init__(self):
        if not (self.gsd > 0.0 and math.isfinite(self.gsd)):
            raise ValueError(f"gsd must be positive, got {self.gsd}")
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("grid must have at least one column and one row")

    @classmethod
    def from_bounds(cls, min_x: float, min_y: float, max_x: float, max_y: float, gsd: float) -> "GridSpec":
        """Smallest grid at multiples of gsd whose half-open cells cover the bounds.

        Points exactly at the upper bounds stay inside (an extra cell is
        added when the bound lands on a cell edge), which is what the
        bounding-box default of the rasterize command needs.
        """
        if gsd <= 0.0:
            raise ValueError(f"gsd must be positive, got {gsd}")
        if max_x < min_x or max_y < min_y:
            raise ValueError("empty bounds")
        ox = math.floor(min_x / gsd) * gsd
        oy = math.floor(min_y / gsd) * gsd
        ncols = int(math.floor((max_x - ox) / gsd)) + 1
        nrows = int(math.floor((max_y - oy) / gsd)) + 1
        return cls(ox, oy, gsd, ncols, nrows)

    @classmethod
    def from_extent(cls, min_x: float, min_y: float, max_x: float, max_y: float, gsd: float) -> "GridSpec":
        """Grid of exactly ceil(extent / gsd) cells per axis.

        A 354 m x 185 m extent at gsd 0.1 gives 3540 x 1850 cells; the
        upper edges are exclusive like every other cell boundary.
        """
        if gsd <= 0.0:
            raise ValueError(f"gsd must be positive, got {gsd}")
        if max_x <= min_x or max_y <= min_y:
            raise ValueError("empty extent")
        ncols = max(1, int(math.ceil((max_x - min_x) / gsd - 1e-9)))
        nrows = max(1, int(math.ceil((max_y - min_y) / gsd - 1e-9)))
        return cls(min_x, min_y, gsd, ncols, nrows)

    @property
    def n_cells(self) -> int:
        return self.ncols * self.nrows

    def cell_of(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Column/row indices of points; may fall outside [0, ncols) x [0, nrows)."""
        col = np.floor((np.asarray(x) - self.origin_x) / self.gsd).astype(np.int64)
        row = np.floor((np.asarray(y) - self.origin_y) / self.gsd).astype(np.int64)
        return col, row


@dataclass(frozen=True)
class RasterGrid:
    """Result of the z-buffer pass: per-cell winning original point.

    Arrays are (nrows, ncols) with row 0 at the grid origin (south).
    NO_DATA cells carry NaN coordinates and source_index -1.
    """

    spec: GridSpec
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    source_index: np.ndarray
    n_outside: int = 0

    @property
    def occupied(self) -> np.ndarray:
        return self.source_index >= 0

    @property
    def n_occupied(self) -> int:
        return int(self.occupied.sum())


def _chunk_winners(points: np.ndarray, spec: GridSpec, start: int):
    """Per-cell winner (max z, then lowest global index) within one chunk."""
    col, row = spec.cell_of(points[:, 0], points[:, 1])
    inside = (col >= 0) & (col < spec.ncols) & (row >= 0) & (row < spec.nrows)
    n_outside = int((~inside).sum())
    col = col[inside]
    row = row[inside]
    z = points[inside, 2]
    idx = np.nonzero(inside)[0] + start
    cell = row * spec.ncols + col
    order = np.lexsort((idx, -z, cell))
    cells_sorted = cell[order]
    uniq, first = np.unique(cells_sorted, return_index=True)
    return uniq, idx[order][first], z[order][first], n_outside


def rasterize(points: np.ndarray, spec: GridSpec, threads: int = 1) -> RasterGrid:
    """Grid a cloud, keeping the highest point per cell.

    Points outside the grid footprint are counted, not stored. The
    result is independent of threads (the merge rule is a total order
    on (z, index) pairs).
    """
    points = validate_cloud(points)
    n = len(points)
    starts = list(range(0, n, _RASTER_CHUNK))
    chunks = [(points[s:s + _RASTER_CHUNK], spec, s) for s in starts]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda args: _chunk_winners(*args), chunks))
    else:
        results = [_chunk_winners(*args) for args in chunks]

    best_z = np.full(spec.n_cells, -np.inf)
    best_idx = np.full(spec.n_cells, np.iinfo(np.int64).max, dtype=np.int64)
    n_outside = 0
    for cells, idx, z, outside in results:
        n_outside += outside
        cur_z = best_z[cells]
        cur_i = best_idx[cells]
        take = (z > cur_z) | ((z == cur_z) & (idx < cur_i))
        upd = cells[take]
        best_z[upd] = z[take]
        best_idx[upd] = idx[take]

    shape = (spec.nrows, spec.ncols)
    gx = np.full(shape, np.nan)
    gy = np.full(shape, np.nan)
    gz = np.full(shape, np.nan)
    src = np.full(shape, -1, dtype=np.int64)
    occ = np.isfinite(best_z)
    if occ.any():
        cells = np.nonzero(occ)[0]
        rows, cols = np.divmod(cells, spec.ncols)
        winners = best_idx[cells]
        gx[rows, cols] = points[winners, 0]
        gy[rows, cols] = points[winners, 1]
        gz[rows, cols] = points[winners, 2]
        src[rows, cols] = winners
    return RasterGrid(spec, gx, gy, gz, src, n_outside)


def extract_cloud(grid: RasterGrid) -> np.ndarray:
    """Stored original points of occupied cells, row-major by cell."""
    mask = grid.occupied
    return np.column_stack([grid.x[mask], grid.y[mask], grid.z[mask]])


def mesh_from_grid(grid: RasterGrid) -> SurfaceMesh:
    """Triangulate occupied cells into a reference surface.

    Every 2x2 block of occupied cells yields two triangles on the
    stored original points, split along the NW-SE diagonal; blocks with
    exactly three occupied cells yield the single triangle of those
    three. Degenerate (zero-area or vertical) triangles are dropped:
    they have no up-facing footprint to match against.
    """
    mask = grid.occupied
    n_occ = int(mask.sum())
    vid = np.full(mask.shape, -1, dtype=np.int64)
    vid[mask] = np.arange(n_occ)
    vertices = extract_cloud(grid)

    sw, se = vid[:-1, :-1], vid[:-1, 1:]
    nw, ne = vid[1:, :-1], vid[1:, 1:]
    m_sw, m_se = mask[:-1, :-1], mask[:-1, 1:]
    m_nw, m_ne = mask[1:, :-1], mask[1:, 1:]

    def _collect(sel: np.ndarray, corners) -> np.ndarray:
        if not sel.any():
            return np.empty((0, 3), dtype=np.int64)
        return np.stack([c[sel] for c in corners], axis=1)

    full = m_sw & m_se & m_nw & m_ne
    lower = _collect(full, (nw, sw, se))
    upper = _collect(full, (nw, se, ne))
    two = np.empty((2 * len(lower), 3), dtype=np.int64)
    two[0::2] = lower
    two[1::2] = upper

    parts = [two]
    parts.append(_collect(~m_sw & m_se & m_nw & m_ne, (nw, se, ne)))
    parts.append(_collect(m_sw & ~m_se & m_nw & m_ne, (nw, sw, ne)))
    parts.append(_collect(m_sw & m_se & ~m_nw & m_ne, (sw, se, ne)))
    parts.append(_collect(m_sw & m_se & m_nw & ~m_ne, (nw, sw, se)))
    triangles = np.concatenate(parts)

    if len(triangles) == 0:
        raise DegenerateGridError("no 2x2 neighborhood with 3 or more occupied cells")

    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    cross = np.cross(b - a, c - a)
    area2 = np.linalg.norm(cross, axis=1)
    keep = (0.5 * area2 > MIN_TRIANGLE_AREA) & (np.abs(cross[:, 2]) > 0.0)
    triangles = triangles[keep]
    if len(triangles) == 0:
        raise DegenerateGridError("all candidate triangles are degenerate")
    return SurfaceMesh.from_arrays(vertices, triangles)
