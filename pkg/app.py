#!/usr/bin/env python3
"""
CanopyForge - LiDAR forest structure rasters
Command-line entry point
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from controllers.evaluation_controller import aggregate_tiles, evaluate_bands
from controllers.ground_controller import (
    build_ground_grid,
    compute_hag,
    density_summary,
    point_density,
)
from controllers.loss_controller import KERNELS, finite_difference_check, random_kernel_inputs
from controllers.metrics_controller import FHD_BASES, compute_all
from controllers.patch_controller import extract_patches, filter_patches
from controllers.raster_controller import (
    RESAMPLE_METHODS,
    align_to_reference,
    build_validity_mask,
    require_same_grid,
    resample,
)
from controllers.stitch_controller import BLEND_MODES, plan_windows, stitch_bands
from models.loss_model import CHANNELS
from models.metrics_model import PadParams
from models.raster_model import GridSpec, MaskRaster
from models.report_model import RunManifest, VALIDATION_STATISTICS, STATISTICS
from utils.errors import CanopyForgeError, InvalidParameterError, MissingInputError
from utils.file_handlers import (
    FileHandler,
    file_digest,
    read_binary,
    read_pad_grid,
    read_plan_csv,
    read_raster,
    write_report,
)
from utils.point_readers import read_point_cloud
from utils.settings import (
    DEFAULT_CANOPY_HEIGHT,
    DEFAULT_CELL_SIZE,
    DEFAULT_EPS,
    DEFAULT_MIN_VALID_FRACTION,
    DEFAULT_OVERLAP,
    DEFAULT_PAD_FACTOR,
    DEFAULT_PATCH_SIZE,
    DEFAULT_PERCENTILES,
    DEFAULT_TARGET_CELL,
    DEFAULT_THRESHOLD,
    GRADIENT_TOLERANCE,
    TOOL_NAME,
    TOOL_VERSION,
    Settings,
)
from views.report_view import ReportView

logger = logging.getLogger(TOOL_NAME.lower())

PAD_DEFAULTS = PadParams()


def parse_percentiles(text: str) -> List[float]:
    """'5,50,95' -> [0.05, 0.5, 0.95]"""
    try:
        values = [float(token) / 100.0 for token in text.split(",") if token.strip()]
    except ValueError as exc:
        raise InvalidParameterError("percentiles", f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise InvalidParameterError("percentiles", "at least one percentile is required")
    return values


def _digests(paths: Sequence[Path]) -> Dict[str, str]:
    """Content digests of the inputs; binary rasters include their header."""
    digests = {}
    for path in paths:
        path = Path(path)
        targets = [path]
        if path.suffix == ".f64":
            targets.append(path.with_suffix(".hdr"))
        elif path.suffix == ".hdr":
            targets = [path.with_suffix(".f64"), path]
        for target in targets:
            if not target.exists():
                raise MissingInputError(f"input not found: {target}")
            digests[str(target)] = file_digest(target)
    return digests


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _parameters(args: argparse.Namespace, settings: Settings, **extra) -> Dict:
    parameters = {key: value for key, value in vars(args).items() if key != "handler"}
    parameters.update(settings.to_dict())
    parameters.update(extra)
    return {key: _plain(value) for key, value in parameters.items()}


def _finish(handler: FileHandler, command: str, parameters: Dict, inputs: Sequence[Path]) -> int:
    manifest = RunManifest(command, parameters, _digests(inputs), TOOL_VERSION)
    path = handler.save_manifest(manifest)
    ReportView().show_outputs(command, manifest.outputs)
    logger.info("Manifest written to %s", path)
    return 0


def cmd_metrics(args: argparse.Namespace, settings: Settings) -> int:
    """Point cloud -> HAG -> CHM, PAI, FHD and height percentile rasters."""
    params = PadParams(k=args.k, dz=args.dz, max_height=args.max_height)
    percentiles = parse_percentiles(args.percentiles)
    if not args.cell > 0:
        raise InvalidParameterError("cell", f"must be > 0, got {args.cell}")

    cloud = read_point_cloud(args.input)
    cloud.require_points()
    logger.info("Read %d points from %s (EPSG:%d)", len(cloud), args.input, cloud.crs_code)
    ground = build_ground_grid(cloud, args.ground_cell)
    hag = compute_hag(cloud, ground, params.max_height)
    grid = GridSpec.covering(cloud.bounds, args.cell, cloud.crs_code)
    rasters, pad = compute_all(hag, grid, params, percentiles, args.fhd_basis, settings.threads)

    handler = FileHandler(args.out)
    for raster in rasters:
        handler.save_raster(raster)
    handler.save_pad_grid(pad)
    parameters = _parameters(args, settings, percentile_fractions=percentiles,
                             pad_params=params.to_dict(), ground_used_all_points=ground.used_all_points,
                             hag_clamped=hag.clamped_count, hag_dropped=hag.dropped_count)
    return _finish(handler, "metrics", parameters, [args.input])


def cmd_resample(args: argparse.Namespace, settings: Settings) -> int:
    src = read_raster(args.input)
    result = resample(src, args.target_cell, args.method)
    handler = FileHandler(args.out)
    handler.save_raster(result)
    return _finish(handler, "resample", _parameters(args, settings), [args.input])


def cmd_align(args: argparse.Namespace, settings: Settings) -> int:
    src = read_raster(args.input)
    reference = read_raster(args.reference).grid
    result = align_to_reference(src, reference)
    handler = FileHandler(args.out)
    handler.save_raster(result)
    return _finish(handler, "align", _parameters(args, settings, reference_grid=reference.to_dict()),
                   [args.input, args.reference])


def _patch_mask(args: argparse.Namespace, tile: Dict) -> MaskRaster:
    if args.mask:
        raster = read_raster(args.mask)
        return MaskRaster(raster.grid, raster.valid & (np.nan_to_num(raster.values) != 0))
    targets = [tile[band] for band in CHANNELS if band in tile] or list(tile.values())
    return build_validity_mask(targets)


def cmd_patchify(args: argparse.Namespace, settings: Settings) -> int:
    tile = {}
    for path in args.rasters:
        raster = read_raster(path)
        if raster.band_name in tile:
            raise InvalidParameterError("rasters", f"band '{raster.band_name}' given twice")
        tile[raster.band_name] = raster
    require_same_grid(list(tile.values()))
    mask = _patch_mask(args, tile)
    pad = read_pad_grid(args.pad) if args.pad else None

    tile_id = args.tile_id or Path(args.rasters[0]).parent.name or "tile"
    extracted = extract_patches(tile, mask, args.patch, args.stride, pad, args.pad_factor, tile_id)
    kept = filter_patches(extracted, args.min_valid, args.min_canopy, "chm", args.canopy_height)

    handler = FileHandler(args.out)
    handler.save_patch_set(kept)
    inputs = list(args.rasters) + ([args.mask] if args.mask else []) + ([args.pad] if args.pad else [])
    parameters = _parameters(args, settings, tile_id=tile_id, n_extracted=len(extracted), n_kept=len(kept))
    return _finish(handler, "patchify", parameters, inputs)


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    if len(args.pred) != len(args.ref):
        raise InvalidParameterError("ref", f"{len(args.pred)} predictions but {len(args.ref)} references")
    reports = []
    for pred_path, ref_path in zip(args.pred, args.ref):
        pred = read_raster(pred_path)
        ref = read_raster(ref_path).renamed(pred.band_name)
        grid = require_same_grid([pred, ref])
        mask = MaskRaster(grid, pred.valid & ref.valid)
        reports.append(evaluate_bands({pred.band_name: pred}, {pred.band_name: ref}, mask,
                                      args.threshold, tile_id=Path(pred_path).stem))
    report = reports[0] if len(reports) == 1 else aggregate_tiles(reports)

    statistics = VALIDATION_STATISTICS if args.suite == "validation" else STATISTICS
    if args.out is None:
        write_report(report, args.format, sys.stdout, args.suite)
        return 0
    ReportView().show_evaluation(report, statistics)
    handler = FileHandler(args.out)
    handler.save_report(report, args.format, suite=args.suite)
    return _finish(handler, "evaluate", _parameters(args, settings), list(args.pred) + list(args.ref))


def window_path(directory: Path, band: str, row0: int, col0: int) -> Path:
    return Path(directory) / f"{band}_{row0}_{col0}.f64"


def cmd_stitch(args: argparse.Namespace, settings: Settings) -> int:
    if args.plan:
        plan = read_plan_csv(args.plan, args.window, args.overlap)
    else:
        if args.tile_height is None or args.tile_width is None:
            raise InvalidParameterError("tile dims", "give --plan or both --tile-height and --tile-width")
        plan = plan_windows((args.tile_height, args.tile_width), args.window, args.overlap)

    bands = [band.strip() for band in args.bands.split(",") if band.strip()]
    window_preds: Dict[str, List[np.ndarray]] = {}
    inputs = []
    grid = None
    for band in bands:
        window_preds[band] = []
        for row0, col0 in plan.windows:
            path = window_path(args.windows, band, row0, col0)
            raster = read_binary(path)
            inputs.append(path)
            if grid is None:
                first = raster.grid
                grid = GridSpec(first.origin_x - col0 * first.cell_size,
                                first.origin_y + row0 * first.cell_size,
                                first.cell_size, plan.tile_dims[1], plan.tile_dims[0], first.crs_code)
            window_preds[band].append(raster.values)

    deterministic = settings.threads <= 1
    stitched = stitch_bands(plan, window_preds, grid, args.mode, deterministic, settings.threads)
    handler = FileHandler(args.out)
    for raster in stitched.values():
        handler.save_raster(raster)
    handler.save_plan(plan)
    inputs += [args.plan] if args.plan else []
    parameters = _parameters(args, settings, n_windows=len(plan), deterministic=deterministic)
    return _finish(handler, "stitch", parameters, inputs)


def cmd_losscheck(args: argparse.Namespace, settings: Settings) -> int:
    """Finite-difference verification of every loss kernel; exit 1 on failure."""
    names = [name.strip() for name in args.kernels.split(",")] if args.kernels else list(KERNELS)
    unknown = [name for name in names if name not in KERNELS]
    if unknown:
        raise InvalidParameterError("kernels", f"unknown kernel {unknown[0]!r}")
    rng = np.random.default_rng(settings.seed)
    errors = {}
    for name in names:
        inputs = random_kernel_inputs(name, rng)
        errors[name] = finite_difference_check(name, inputs, args.eps, args.coords, settings.seed)
    ReportView().show_gradient_check(errors, args.tolerance)
    failed = [name for name, error in errors.items() if not error <= args.tolerance]
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return 1
    return 0


def cmd_density(args: argparse.Namespace, settings: Settings) -> int:
    densities = {}
    for path in args.inputs:
        cloud = read_point_cloud(path)
        cloud.require_points()
        densities[Path(path).name] = point_density(cloud)
    ReportView().show_density(density_summary(densities))
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Argument parser; flag defaults come from the module defaults."""
    parser = argparse.ArgumentParser(prog="canopyforge",
                                     description="LiDAR point clouds to forest structure rasters")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $CANOPYFORGE_THREADS or available cores)")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default: 42)")
    parser.add_argument("--log-level", default=None,
                        help="logging level (default: $CANOPYFORGE_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    metrics = commands.add_parser("metrics", help="compute canopy metric rasters from a LAS/XYZ file")
    metrics.add_argument("input", type=Path)
    metrics.add_argument("--out", type=Path, required=True)
    metrics.add_argument("--cell", type=float, default=DEFAULT_CELL_SIZE)
    metrics.add_argument("--ground-cell", type=float, default=DEFAULT_CELL_SIZE)
    metrics.add_argument("--dz", type=float, default=PAD_DEFAULTS.dz)
    metrics.add_argument("--k", type=float, default=PAD_DEFAULTS.k)
    metrics.add_argument("--max-height", type=float, default=PAD_DEFAULTS.max_height)
    metrics.add_argument("--percentiles",
                         default=",".join(f"{round(p * 100):g}" for p in DEFAULT_PERCENTILES))
    metrics.add_argument("--fhd-basis", choices=FHD_BASES, default=FHD_BASES[0])
    metrics.set_defaults(handler=cmd_metrics)

    resample_cmd = commands.add_parser("resample", help="resample a raster by an integer cell ratio")
    resample_cmd.add_argument("input", type=Path)
    resample_cmd.add_argument("--out", type=Path, required=True)
    resample_cmd.add_argument("--target-cell", type=float, default=DEFAULT_TARGET_CELL)
    resample_cmd.add_argument("--method", choices=RESAMPLE_METHODS, default="bilinear")
    resample_cmd.set_defaults(handler=cmd_resample)

    align = commands.add_parser("align", help="place a raster on a reference grid")
    align.add_argument("input", type=Path)
    align.add_argument("--reference", type=Path, required=True)
    align.add_argument("--out", type=Path, required=True)
    align.set_defaults(handler=cmd_align)

    patchify = commands.add_parser("patchify", help="cut aligned rasters into training patches")
    patchify.add_argument("rasters", type=Path, nargs="+")
    patchify.add_argument("--out", type=Path, required=True)
    patchify.add_argument("--mask", type=Path, default=None)
    patchify.add_argument("--pad", type=Path, default=None, help="PAD grid written by `metrics`")
    patchify.add_argument("--tile-id", default=None)
    patchify.add_argument("--patch", type=int, default=DEFAULT_PATCH_SIZE)
    patchify.add_argument("--stride", type=int, default=DEFAULT_PATCH_SIZE)
    patchify.add_argument("--min-valid", type=float, default=DEFAULT_MIN_VALID_FRACTION)
    patchify.add_argument("--min-canopy", type=float, default=None)
    patchify.add_argument("--canopy-height", type=float, default=DEFAULT_CANOPY_HEIGHT)
    patchify.add_argument("--pad-factor", type=int, default=DEFAULT_PAD_FACTOR)
    patchify.set_defaults(handler=cmd_patchify)

    evaluate_cmd = commands.add_parser("evaluate", help="compare predicted and reference rasters")
    evaluate_cmd.add_argument("--pred", type=Path, nargs="+", required=True)
    evaluate_cmd.add_argument("--ref", type=Path, nargs="+", required=True)
    evaluate_cmd.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    evaluate_cmd.add_argument("--format", choices=("json", "csv"), default="json")
    evaluate_cmd.add_argument("--suite", choices=("test", "validation"), default="test")
    evaluate_cmd.add_argument("--out", type=Path, default=None, help="output directory (default: stdout)")
    evaluate_cmd.set_defaults(handler=cmd_evaluate)

    stitch = commands.add_parser("stitch", help="blend window predictions into a tile raster")
    stitch.add_argument("windows", type=Path, help="directory of <band>_<row0>_<col0>.f64 windows")
    stitch.add_argument("--out", type=Path, required=True)
    stitch.add_argument("--plan", type=Path, default=None, help="row0,col0 CSV plan")
    stitch.add_argument("--tile-height", type=int, default=None)
    stitch.add_argument("--tile-width", type=int, default=None)
    stitch.add_argument("--window", type=int, default=DEFAULT_PATCH_SIZE)
    stitch.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    stitch.add_argument("--bands", default="chm")
    stitch.add_argument("--mode", choices=BLEND_MODES, default=BLEND_MODES[0])
    stitch.set_defaults(handler=cmd_stitch)

    losscheck = commands.add_parser("losscheck", help="verify loss gradients by finite differences")
    losscheck.add_argument("--eps", type=float, default=DEFAULT_EPS)
    losscheck.add_argument("--coords", type=int, default=64)
    losscheck.add_argument("--tolerance", type=float, default=GRADIENT_TOLERANCE)
    losscheck.add_argument("--kernels", default=None, help="comma-separated subset")
    losscheck.set_defaults(handler=cmd_losscheck)

    density = commands.add_parser("density", help="point density of one or more tiles")
    density.add_argument("inputs", type=Path, nargs="+")
    density.set_defaults(handler=cmd_density)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = Settings.resolve(args.threads, args.seed, args.log_level)
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.handler(args, settings)
    except CanopyForgeError as exc:
        logger.error("error: %s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
