"""ASCII file formats: clouds, ESRI grids, transforms, masks, reports.

All writers use fixed decimal formatting so repeated runs produce
byte-identical files. Grid values carry 6 decimal places; transform
parameters 12 significant digits.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .geometry import SimilarityTransform, validate_cloud
from .metrics import EvaluationReport, Histogram
from .raster import GridSpec, RasterGrid

NODATA = -9999.0

_TABLE_ROWS = (
    ("Matching percentage (%)", "matching_percentage"),
    ("Completeness (%)", "completeness"),
    ("delta_0 (m)", "sigma0"),
    ("RMSE (m)", "rmse"),
    ("STD (m)", "std"),
    ("MEAN (m)", "mean"),
    ("Minimum (m)", "minimum"),
    ("Maximum (m)", "maximum"),
    ("Blunders > 3xSTD (count)", "blunder_count_3std"),
    ("Blunders > 3xSTD (%)", "blunder_percentage_3std"),
)


class ParseError(ValueError):
    """Raised when an input file cannot be parsed."""


def read_cloud(path) -> np.ndarray:
    """Read an x y z text cloud ('#' comments, whitespace separated)."""
    try:
        data = np.loadtxt(path, comments="#", dtype=float, ndmin=2)
    except Exception as exc:
        raise ParseError(f"{path}: not a valid cloud file ({exc})") from exc
    if data.size == 0:
        return np.empty((0, 3))
    if data.shape[1] != 3:
        raise ParseError(f"{path}: expected 3 columns, found {data.shape[1]}")
    try:
        return validate_cloud(data)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_cloud(path, points: np.ndarray) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in points:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def sidecar_path(grid_path) -> Path:
    """Companion cloud file holding the original point per occupied cell."""
    p = Path(grid_path)
    return p.with_name(p.stem + "_points.xyz")


def write_ascii_grid(path, spec: GridSpec, values: np.ndarray) -> None:
    """ESRI ASCII grid; NaN cells become the NODATA value.

    Rows are written north to south while row 0 of ``values`` sits at
    the grid origin (south), so the array is flipped on output.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (spec.nrows, spec.ncols):
        raise ValueError(f"values shape {values.shape} does not match grid {spec.nrows}x{spec.ncols}")
    out = np.where(np.isfinite(values), values, NODATA)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"ncols {spec.ncols}\n")
        f.write(f"nrows {spec.nrows}\n")
        f.write(f"xllcorner {spec.origin_x:.6f}\n")
        f.write(f"yllcorner {spec.origin_y:.6f}\n")
        f.write(f"cellsize {spec.gsd:.6f}\n")
        f.write(f"NODATA_value {NODATA:.0f}\n")
        for row in out[::-1]:
            f.write(" ".join(f"{v:.6f}" for v in row))
            f.write("\n")


def read_ascii_grid(path) -> tuple[GridSpec, np.ndarray]:
    """Read an ESRI ASCII grid; NODATA cells become NaN."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            header: dict[str, float] = {}
            for _ in range(6):
                key, value = f.readline().split()
                header[key.lower()] = float(value)
            spec = GridSpec(
                origin_x=header["xllcorner"],
                origin_y=header["yllcorner"],
                gsd=header["cellsize"],
                ncols=int(header["ncols"]),
                nrows=int(header["nrows"]),
            )
            values = np.loadtxt(f, dtype=float, ndmin=2)
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"{path}: not a valid ASCII grid ({exc})") from exc
    if values.shape != (spec.nrows, spec.ncols):
        raise ParseError(
            f"{path}: grid body is {values.shape}, header says {spec.nrows}x{spec.ncols}"
        )
    nodata = header.get("nodata_value", NODATA)
    values = np.where(values == nodata, np.nan, values)
    return spec, values[::-1]


def write_grid_with_sidecar(path, grid: RasterGrid) -> None:
    """Grid z values plus the sidecar cloud of original winning points."""
    write_ascii_grid(path, grid.spec, grid.z)
    mask = grid.occupied
    points = np.column_stack([grid.x[mask], grid.y[mask], grid.z[mask]])
    write_cloud(sidecar_path(path), points)


def read_grid_with_sidecar(path) -> RasterGrid:
    """Rebuild a RasterGrid from a grid file and its original-point sidecar."""
    spec, values = read_ascii_grid(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ParseError(f"{side}: sidecar with original coordinates not found")
    points = read_cloud(side)
    mask = np.isfinite(values)
    n_occ = int(mask.sum())
    if len(points) != n_occ:
        raise ParseError(
            f"{side}: {len(points)} points but grid has {n_occ} occupied cells"
        )
    x = np.full(values.shape, np.nan)
    y = np.full(values.shape, np.nan)
    z = np.full(values.shape, np.nan)
    src = np.full(values.shape, -1, dtype=np.int64)
    x[mask] = points[:, 0]
    y[mask] = points[:, 1]
    z[mask] = points[:, 2]
    src[mask] = np.arange(n_occ)
    return RasterGrid(spec, x, y, z, src, 0)


_TRANSFORM_KEYS = ("tx", "ty", "tz", "omega", "phi", "kappa", "scale")


def write_transform(path, transform: SimilarityTransform, sigma0: float = float("nan")) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in _TRANSFORM_KEYS:
            f.write(f"{key} {getattr(transform, key):.12g}\n")
        f.write(f"sigma0 {sigma0:.12g}\n")


def read_transform(path) -> tuple[SimilarityTransform, float]:
    values: dict[str, float] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, value = line.split()
                values[key] = float(value)
        transform = SimilarityTransform(*(values[k] for k in _TRANSFORM_KEYS))
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"{path}: not a valid transform file ({exc})") from exc
    return transform, values.get("sigma0", math.nan)


def read_polygons(path) -> list[np.ndarray]:
    """Mask polygons, one per line as x1 y1 x2 y2 ... (implicitly closed)."""
    polygons = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                coords = np.array([float(v) for v in line.split()])
                if len(coords) < 6 or len(coords) % 2:
                    raise ParseError(
                        f"{path}:{lineno}: polygon needs an even count of >= 6 coordinates"
                    )
                polygons.append(coords.reshape(-1, 2))
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"{path}: not a valid polygon file ({exc})") from exc
    return polygons


def read_mask_manifest(path) -> list[tuple[str, str, Path]]:
    """Scenario manifest: lines of '<label> <keep-inside|keep-outside> <polygon-file>'.

    Polygon paths are resolved relative to the manifest's directory.
    """
    base = Path(path).parent
    scenarios = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 3 or parts[1] not in ("keep-inside", "keep-outside"):
                    raise ParseError(
                        f"{path}:{lineno}: expected '<label> <keep-inside|keep-outside> <file>'"
                    )
                scenarios.append((parts[0], parts[1], base / parts[2]))
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"{path}: not a valid mask manifest ({exc})") from exc
    return scenarios


def write_report(path, report: EvaluationReport) -> None:
    """Key-value report document for one scenario."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"scenario {report.scenario}\n")
        f.write(f"n_total {report.n_total}\n")
        f.write(f"n_valid {report.n_valid}\n")
        f.write(f"n_used {report.n_used}\n")
        for label, attr in _TABLE_ROWS:
            value = getattr(report, attr)
            if isinstance(value, int):
                f.write(f"{attr} {value}\n")
            else:
                f.write(f"{attr} {value:.12g}\n")


def write_table(path, reports: list[EvaluationReport]) -> None:
    """Delimited metric table: one column per scenario, fixed row order."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric," + ",".join(r.scenario for r in reports) + "\n")
        for label, attr in _TABLE_ROWS:
            cells = []
            for r in reports:
                value = getattr(r, attr)
                cells.append(str(value) if isinstance(value, int) else f"{value:.6f}")
            f.write(label + "," + ",".join(cells) + "\n")


def write_histogram(path, hist: Histogram) -> None:
    """Two columns: bin center, count; under/overflow as comment lines."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# underflow {hist.underflow}\n")
        f.write(f"# overflow {hist.overflow}\n")
        for center, count in zip(hist.bin_centers, hist.counts):
            f.write(f"{center:.6f} {count}\n")


def write_registration_log(path, result) -> None:
    """Per-iteration delta, rejection counts and update norms."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"converged {str(result.converged).lower()}\n")
        f.write(f"iterations {result.iterations}\n")
        f.write(f"sigma0 {result.sigma0:.12g}\n")
        f.write(f"used {result.used_count}\n")
        f.write(f"blunders {result.blunder_count}\n")
        f.write(f"invalid {result.invalid_count}\n")
        for rec in result.log:
            f.write(
                f"iteration {rec.iteration} delta {rec.delta:.12g} "
                f"used {rec.n_used} blunders {rec.n_blunder} invalid {rec.n_invalid} "
                f"dt {rec.update_translation:.12g} dr {rec.update_rotation:.12g} "
                f"ds {rec.update_scale:.12g}\n"
            )
