"""Evaluation statistics, histograms, error rasters and class masking.

The summary mirrors the standard accuracy-report layout: matching
percentage (blunder-free correspondences), completeness (any valid
correspondence, blunders included), RMSE / STD / MEAN / extrema of the
signed residuals, and a count of residuals beyond 3x STD.

Reported STD uses the population convention (divide by n); RMSE, STD
and MEAN then satisfy rmse^2 = std^2 + mean^2 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidPolygonError, NoCorrespondencesError
from .geometry import validate_cloud
from .raster import GridSpec
from .registration import CorrespondenceSet, Status

DEFAULT_K_STEP1 = 5.0
DEFAULT_HIST_WIDTH = 0.1
DEFAULT_HIST_RANGE = (-2.0, 2.0)

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class EvaluationReport:
    """One scenario's worth of quality statistics."""

    scenario: str
    matching_percentage: float
    completeness: float
    sigma0: float
    rmse: float
    std: float
    mean: float
    minimum: float
    maximum: float
    blunder_count_3std: int
    blunder_percentage_3std: float
    n_total: int
    n_valid: int
    n_used: int


@dataclass(frozen=True)
class Histogram:
    """Fixed-width binning with explicit under/overflow."""

    bin_edges: np.ndarray   # ascending, len = nbins + 1
    counts: np.ndarray      # (nbins,) int64
    underflow: int
    overflow: int

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def summarize(
    corr: CorrespondenceSet,
    k_step1: float = DEFAULT_K_STEP1,
    sigma0: float = float("nan"),
    scenario: str = "custom",
    used_only: bool = False,
) -> EvaluationReport:
    """Compute the full metric row from a flagged correspondence set.

    The set should come from a fixed-transform evaluation pass with a
    very large K so blunders are present. Statistics run over all valid
    residuals (blunders included); pass used_only=True for blunder-free
    statistics comparable to the co-registration sigma0. A residual
    counts as blunder-free for the matching percentage when its
    magnitude is within k_step1 times the STD of the valid residuals.
    """
    n_total = len(corr)
    valid = corr.valid
    n_valid = int(valid.sum())
    n_used = int(corr.used.sum())
    if n_valid == 0:
        raise NoCorrespondencesError("no valid correspondences to summarize")

    residuals = corr.residual[corr.used if used_only else valid]
    delta = float(np.std(corr.residual[valid]))
    matched = int((np.abs(corr.residual[valid]) <= k_step1 * delta).sum())

    mean = float(np.mean(residuals))
    std = float(np.std(residuals))
    rmse = float(np.sqrt(np.mean(residuals**2)))
    blunders = int((np.abs(residuals) > 3.0 * std).sum()) if std > 0.0 else 0

    return EvaluationReport(
        scenario=scenario,
        matching_percentage=100.0 * matched / n_total,
        completeness=100.0 * n_valid / n_total,
        sigma0=sigma0,
        rmse=rmse,
        std=std,
        mean=mean,
        minimum=float(np.min(residuals)),
        maximum=float(np.max(residuals)),
        blunder_count_3std=blunders,
        blunder_percentage_3std=100.0 * blunders / n_valid,
        n_total=n_total,
        n_valid=n_valid,
        n_used=n_used,
    )


def histogram(
    residuals: np.ndarray,
    bin_width: float = DEFAULT_HIST_WIDTH,
    value_range: tuple[float, float] = DEFAULT_HIST_RANGE,
) -> Histogram:
    """Bin residuals into half-open intervals [edge_i, edge_i+1).

    Values below the range go to underflow, values at or above the top
    edge to overflow, so total counts are conserved exactly.
    """
    lo, hi = value_range
    if bin_width <= 0.0:
        raise ValueError("bin_width must be positive")
    if not lo < hi:
        raise ValueError("histogram range must satisfy lo < hi")
    r = np.asarray(residuals, dtype=float)
    nbins = max(1, int(np.ceil((hi - lo) / bin_width - 1e-12)))
    edges = lo + bin_width * np.arange(nbins + 1)
    idx = np.floor((r - lo) / bin_width).astype(np.int64)
    underflow = int((idx < 0).sum())
    overflow = int((idx >= nbins).sum())
    inside = idx[(idx >= 0) & (idx < nbins)]
    counts = np.bincount(inside, minlength=nbins).astype(np.int64)
    return Histogram(edges, counts, underflow, overflow)


def error_grid(corr: CorrespondenceSet, spec: GridSpec) -> np.ndarray:
    """Residual raster keyed by the transformed point positions.

    Per cell, the residual of largest magnitude wins; cells without a
    valid correspondence are NaN, which renders the gaps left by failed
    matches.
    """
    grid = np.full((spec.nrows, spec.ncols), np.nan)
    valid = np.nonzero(corr.valid)[0]
    if len(valid) == 0:
        return grid
    col, row = spec.cell_of(corr.transformed[valid, 0], corr.transformed[valid, 1])
    inside = (col >= 0) & (col < spec.ncols) & (row >= 0) & (row < spec.nrows)
    valid, col, row = valid[inside], col[inside], row[inside]
    res = corr.residual[valid]
    cell = row * spec.ncols + col
    order = np.lexsort((valid, -np.abs(res), cell))
    cells_sorted = cell[order]
    _, first = np.unique(cells_sorted, return_index=True)
    winners = order[first]
    grid[row[winners], col[winners]] = res[winners]
    return grid


def _validate_polygon(poly: np.ndarray) -> np.ndarray:
    p = np.asarray(poly, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise InvalidPolygonError("polygon needs at least 3 (x, y) vertices")
    if not np.isfinite(p).all():
        raise InvalidPolygonError("polygon has non-finite vertices")
    edges = np.stack([p, np.roll(p, -1, axis=0)], axis=1)
    if (np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1) == 0.0).any():
        raise InvalidPolygonError("polygon has zero-length edges")
    n = len(p)
    for i in range(n):
        a1, a2 = edges[i]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex by construction
            if _segments_intersect(a1, a2, edges[j, 0], edges[j, 1]):
                raise InvalidPolygonError(f"polygon edges {i} and {j} intersect")
    return p


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, c) -> bool:
    return (
        min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
    )


def _segments_intersect(a1, a2, b1, b2) -> bool:
    d1 = _orient(b1, b2, a1)
    d2 = _orient(b1, b2, a2)
    d3 = _orient(a1, a2, b1)
    d4 = _orient(a1, a2, b2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    for d, (s1, s2, c) in zip(
        (d1, d2, d3, d4),
        ((b1, b2, a1), (b1, b2, a2), (a1, a2, b1), (a1, a2, b2)),
    ):
        if d == 0 and _on_segment(s1, s2, c):
            return True
    return False


def points_in_polygon(xy: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd membership test; points on an edge count as inside."""
    p = _validate_polygon(poly)
    xy = np.asarray(xy, dtype=float)
    px, py = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    on_edge = np.zeros(len(xy), dtype=bool)
    n = len(p)
    for i in range(n):
        x1, y1 = p[i]
        x2, y2 = p[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
        # boundary test: distance to the edge line below tolerance and
        # projection within the segment
        ex, ey = x2 - x1, y2 - y1
        elen = float(np.hypot(ex, ey))
        cross = (px - x1) * ey - (py - y1) * ex
        t = ((px - x1) * ex + (py - y1) * ey) / (elen * elen)
        on_edge |= (np.abs(cross) <= _EDGE_TOL * elen) & (t >= -_EDGE_TOL) & (t <= 1.0 + _EDGE_TOL)
    return inside | on_edge


def apply_mask(points: np.ndarray, polygons, mode: str) -> np.ndarray:
    """Filter a cloud by polygon membership of the (x, y) footprint.

    mode "keep-inside" retains points inside or on the boundary of any
    polygon; "keep-outside" retains the exact complement, so the two
    modes partition the cloud.
    """
    if mode not in ("keep-inside", "keep-outside"):
        raise ValueError(f"mode must be keep-inside or keep-outside, got {mode!r}")
    points = validate_cloud(points)
    member = np.zeros(len(points), dtype=bool)
    for poly in polygons:
        member |= points_in_polygon(points[:, :2], poly)
    return points[member] if mode == "keep-inside" else points[~member]
