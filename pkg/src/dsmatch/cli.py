"""Command-line pipeline: rasterize -> register -> evaluate, plus utilities.

Exit codes: 0 success, 2 input parse failure, 3 invalid arguments,
4 registration did not converge, 5 rank-deficient geometry, 6 no valid
correspondences. Errors print a single line to stderr; success paths
write nothing there.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import DegenerateGridError, NoCorrespondencesError, RankDeficientError
from .geometry import IDENTITY, SimilarityTransform
from .metrics import apply_mask, error_grid, histogram, summarize
from .raster import DEFAULT_GSD, GridSpec, mesh_from_grid, rasterize
from .registration import RegistrationConfig, evaluate_fixed, register
from .surface import DEFAULT_MAX_DIST, build_index
from .synth import PerturbationSpec, SceneSpec, make_scene, perturb

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_USAGE = 3
EXIT_NOT_CONVERGED = 4
EXIT_RANK_DEFICIENT = 5
EXIT_NO_CORRESPONDENCES = 6


class UsageError(Exception):
    pass


def _require_positive(value: float, flag: str) -> float:
    if not value > 0.0:
        raise UsageError(f"{flag} must be positive, got {value}")
    return value


def _default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def cmd_rasterize(args) -> int:
    _require_positive(args.gsd, "--gsd")
    points = io.read_cloud(args.input)
    if args.extent is not None:
        min_x, min_y, max_x, max_y = args.extent
        if max_x <= min_x or max_y <= min_y:
            raise UsageError("--extent must satisfy min < max on both axes")
        spec = GridSpec.from_extent(min_x, min_y, max_x, max_y, args.gsd)
    elif len(points) == 0:
        raise UsageError("--extent is required for an empty input cloud")
    else:
        spec = GridSpec.from_bounds(
            points[:, 0].min(), points[:, 1].min(),
            points[:, 0].max(), points[:, 1].max(), args.gsd,
        )
    grid = rasterize(points, spec, threads=args.threads)
    io.write_grid_with_sidecar(args.output, grid)
    print(
        f"grid {spec.ncols}x{spec.nrows} cells={spec.n_cells} "
        f"occupied={grid.n_occupied} outside={grid.n_outside}"
    )
    return EXIT_OK


def _load_reference(path, threads: int):
    grid = io.read_grid_with_sidecar(path)
    mesh = mesh_from_grid(grid)
    return build_index(mesh)


def cmd_register(args) -> int:
    _require_positive(args.k, "--k")
    _require_positive(args.max_dist, "--max-dist")
    if args.max_iter < 1:
        raise UsageError(f"--max-iter must be at least 1, got {args.max_iter}")
    points = io.read_cloud(args.search)
    index = _load_reference(args.reference, args.threads)
    config = RegistrationConfig(
        k_blunder=args.k,
        estimate_scale=args.estimate_scale,
        max_iterations=args.max_iter,
        max_dist=args.max_dist,
    )
    result = register(points, index, config, workers=args.threads)
    io.write_transform(args.out, result.transform, result.sigma0)
    log_path = args.log or str(args.out) + ".log"
    io.write_registration_log(log_path, result)
    print(
        f"converged={str(result.converged).lower()} iterations={result.iterations} "
        f"sigma0={result.sigma0:.6g} used={result.used_count} "
        f"blunders={result.blunder_count} invalid={result.invalid_count}"
    )
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_evaluate(args) -> int:
    _require_positive(args.k, "--k")
    _require_positive(args.k_step1, "--k-step1")
    _require_positive(args.max_dist, "--max-dist")
    _require_positive(args.hist_width, "--hist-width")
    if args.hist_min >= args.hist_max:
        raise UsageError("--hist-min must be below --hist-max")

    points = io.read_cloud(args.search)
    grid = io.read_grid_with_sidecar(args.reference)
    index = build_index(mesh_from_grid(grid))
    if args.transform:
        transform, sigma0 = io.read_transform(args.transform)
    else:
        transform, sigma0 = IDENTITY, float("nan")

    scenarios: list[tuple[str, np.ndarray]] = [("whole", points)]
    if args.masks:
        for label, mode, poly_path in io.read_mask_manifest(args.masks):
            polygons = io.read_polygons(poly_path)
            scenarios.append((label, apply_mask(points, polygons, mode)))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for label, cloud in scenarios:
        if len(cloud) == 0:
            raise NoCorrespondencesError(f"scenario {label!r} has no points after masking")
        corr, _ = evaluate_fixed(cloud, transform, index, args.k, args.max_dist, args.threads)
        report = summarize(corr, k_step1=args.k_step1, sigma0=sigma0, scenario=label)
        reports.append(report)

        hist = histogram(
            corr.residual[corr.valid], args.hist_width, (args.hist_min, args.hist_max)
        )
        residual_raster = error_grid(corr, grid.spec)
        io.write_report(out_dir / f"report_{label}.txt", report)
        io.write_histogram(out_dir / f"histogram_{label}.csv", hist)
        io.write_ascii_grid(out_dir / f"error_grid_{label}.asc", grid.spec, residual_raster)
        if not args.no_figures:
            from . import plots

            plots.render_histogram(out_dir / f"histogram_{label}.png", hist, label)
            plots.render_error_map(out_dir / f"error_map_{label}.png", grid.spec, residual_raster, label)
        print(
            f"scenario={label} n={report.n_total} "
            f"matching={report.matching_percentage:.2f}% "
            f"completeness={report.completeness:.2f}% rmse={report.rmse:.4f}"
        )
    io.write_table(out_dir / "table.csv", reports)
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = SceneSpec(
        kind=args.kind,
        extent_x=_require_positive(args.extent_x, "--extent-x"),
        extent_y=_require_positive(args.extent_y, "--extent-y"),
        gsd=_require_positive(args.gsd, "--gsd"),
        amplitude=args.amplitude,
        seed=args.seed,
    )
    try:
        transform = SimilarityTransform(
            args.tx, args.ty, args.tz, args.omega, args.phi, args.kappa, args.scale
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.noise_sigma < 0.0:
        raise UsageError("--noise-sigma must be non-negative")
    if not 0.0 <= args.blunder_fraction <= 1.0:
        raise UsageError("--blunder-fraction must be in [0, 1]")
    pspec = PerturbationSpec(
        transform=transform,
        noise_sigma=args.noise_sigma,
        blunder_fraction=args.blunder_fraction,
        blunder_magnitude=args.blunder_magnitude,
        seed=args.perturb_seed,
    )
    _, samples = make_scene(scene)
    search, labels = perturb(samples, pspec)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_cloud(out_dir / "reference.xyz", samples)
    io.write_cloud(out_dir / "search.xyz", search)
    with open(out_dir / "labels.txt", "w", encoding="utf-8") as f:
        for is_blunder in labels:
            f.write("blunder\n" if is_blunder else "clean\n")
    print(f"scene={args.kind} points={len(samples)} blunders={int(labels.sum())}")
    return EXIT_OK


def cmd_mask(args) -> int:
    points = io.read_cloud(args.input)
    polygons = io.read_polygons(args.polygons)
    kept = apply_mask(points, polygons, args.mode)
    io.write_cloud(args.output, kept)
    print(f"kept={len(kept)} removed={len(points) - len(kept)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsmatch",
        description="Co-register DSM point clouds to a reference surface and report quality metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="z-buffer a cloud onto a fixed-GSD grid")
    p.add_argument("input", help="input cloud (x y z per line)")
    p.add_argument("output", help="output ASCII grid (a *_points.xyz sidecar is written too)")
    p.add_argument("--gsd", type=float, default=DEFAULT_GSD, help="cell size in meters")
    p.add_argument(
        "--extent", type=float, nargs=4, metavar=("MINX", "MINY", "MAXX", "MAXY"),
        help="grid bounds; default: input bounding box snapped outward to gsd multiples",
    )
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("register", help="estimate the transform onto the reference surface")
    p.add_argument("search", help="search cloud to register")
    p.add_argument("reference", help="reference ASCII grid (with sidecar)")
    p.add_argument("--out", required=True, help="output transform file")
    p.add_argument("--log", help="iteration log path (default: <out>.log)")
    p.add_argument("--k", type=float, default=5.0, help="blunder rejection factor")
    scale_group = p.add_mutually_exclusive_group()
    scale_group.add_argument(
        "--fix-scale", dest="estimate_scale", action="store_false",
        help="hold scale at 1 (default)",
    )
    scale_group.add_argument(
        "--estimate-scale", dest="estimate_scale", action="store_true",
        help="estimate the 7th parameter",
    )
    p.set_defaults(estimate_scale=False)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--max-dist", type=float, default=DEFAULT_MAX_DIST)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="fixed-transform evaluation and report products")
    p.add_argument("search", help="search cloud")
    p.add_argument("reference", help="reference ASCII grid (with sidecar)")
    p.add_argument("--transform", help="transform file from register (default: identity)")
    p.add_argument("--k", type=float, default=100.0, help="rejection factor for this pass")
    p.add_argument("--k-step1", type=float, default=5.0, help="factor defining blunder-free matches")
    p.add_argument("--max-dist", type=float, default=DEFAULT_MAX_DIST)
    p.add_argument("--masks", help="scenario manifest: '<label> <keep-inside|keep-outside> <file>'")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--hist-width", type=float, default=0.1)
    p.add_argument("--hist-min", type=float, default=-2.0)
    p.add_argument("--hist-max", type=float, default=2.0)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic scene and perturbed search cloud")
    p.add_argument("--kind", choices=("plane", "ridged-terrain", "building-blocks"),
                   default="ridged-terrain")
    p.add_argument("--extent-x", type=float, default=50.0)
    p.add_argument("--extent-y", type=float, default=50.0)
    p.add_argument("--gsd", type=float, default=0.5)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tx", type=float, default=0.0)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--tz", type=float, default=0.0)
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--blunder-fraction", type=float, default=0.0)
    p.add_argument("--blunder-magnitude", type=float, default=0.0)
    p.add_argument("--perturb-seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="filter a cloud by mask polygons")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--polygons", required=True, help="polygon file, one polygon per line")
    p.add_argument("--mode", choices=("keep-inside", "keep-outside"), required=True)
    p.set_defaults(func=cmd_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except RankDeficientError as exc:
        print(f"error: rank-deficient geometry: {exc}", file=sys.stderr)
        return EXIT_RANK_DEFICIENT
    except NoCorrespondencesError as exc:
        print(f"error: no correspondences: {exc}", file=sys.stderr)
        return EXIT_NO_CORRESPONDENCES
    except DegenerateGridError as exc:
        print(f"error: degenerate grid: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
