import logging
from typing import List, Sequence

import numpy as np

from models.raster_model import GridSpec, MaskRaster, MetricRaster, near_integer
from utils.errors import (
    AlignmentError,
    CrsMismatchError,
    GridMismatchError,
    InvalidParameterError,
    ResampleError,
)

logger = logging.getLogger(__name__)

RESAMPLE_METHODS = ("nearest", "bilinear")
DOWNSAMPLE_METHODS = ("mean", "nearest")


def grids_match(a: GridSpec, b: GridSpec, tolerance: float = 1e-9) -> bool:
    """Same shape, CRS, cell size and origin (floats compared to a relative tolerance)."""
    if (a.width, a.height, a.crs_code) != (b.width, b.height, b.crs_code):
        return False
    scale = max(1.0, abs(a.origin_x), abs(a.origin_y))
    return (abs(a.cell_size - b.cell_size) <= tolerance * a.cell_size
            and abs(a.origin_x - b.origin_x) <= tolerance * scale
            and abs(a.origin_y - b.origin_y) <= tolerance * scale)


def require_same_grid(rasters: Sequence[MetricRaster]) -> GridSpec:
    """Return the shared grid or raise GridMismatchError."""
    grid = rasters[0].grid
    for raster in rasters[1:]:
        if not grids_match(grid, raster.grid):
            raise GridMismatchError(
                f"band '{raster.band_name}' grid {raster.grid.to_dict()} differs from "
                f"'{rasters[0].band_name}' grid {grid.to_dict()}"
            )
    return grid


def bilinear_sample(raster: MetricRaster, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """
    Nodata-aware bilinear interpolation between cell centres.

    Queries beyond the outermost centres are clamped to the edge. Nodata
    neighbours get zero weight and the remaining weights are renormalised; a
    query whose weighted neighbours are all nodata returns NaN. The result is
    accumulated as deviations from one contributing neighbour, so constant
    neighbourhoods reproduce their value exactly.

    Args:
        raster: Source raster
        xs, ys: Query coordinates (any matching shapes)

    Returns:
        Interpolated values with the shape of xs
    """
    grid = raster.grid
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    shape = xs.shape
    u = np.clip((xs.ravel() - grid.origin_x) / grid.cell_size - 0.5, 0, grid.width - 1)
    v = np.clip((grid.origin_y - ys.ravel()) / grid.cell_size - 0.5, 0, grid.height - 1)

    c0 = np.minimum(np.floor(u).astype(np.int64), max(grid.width - 2, 0))
    r0 = np.minimum(np.floor(v).astype(np.int64), max(grid.height - 2, 0))
    c1 = np.minimum(c0 + 1, grid.width - 1)
    r1 = np.minimum(r0 + 1, grid.height - 1)
    tx = u - c0
    ty = v - r0

    values = np.stack([raster.values[r0, c0], raster.values[r0, c1],
                       raster.values[r1, c0], raster.values[r1, c1]])
    valid = np.stack([raster.valid[r0, c0], raster.valid[r0, c1],
                      raster.valid[r1, c0], raster.valid[r1, c1]])
    weights = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty])
    weights = np.where(valid & (weights > 0), weights, 0.0)

    contributing = weights > 0
    total = weights.sum(axis=0)
    first = np.argmax(contributing, axis=0)
    reference = values[first, np.arange(values.shape[1])]
    with np.errstate(invalid="ignore", divide="ignore"):
        deviation = np.where(contributing, values - reference, 0.0)
        out = reference + (weights * deviation).sum(axis=0) / total
    out[total == 0] = np.nan
    return out.reshape(shape)


def _upsample(src: MetricRaster, factor: int, method: str) -> MetricRaster:
    grid = src.grid.with_cell_size(src.grid.cell_size / factor)
    if method == "nearest":
        values = np.repeat(np.repeat(src.values, factor, axis=0), factor, axis=1)
    else:
        xs, ys = grid.cell_centers()
        values = bilinear_sample(src, xs, ys)
    return MetricRaster.from_values(grid, values, src.band_name,
                                    {**src.metadata, "resample_method": method})


def block_nanmean(array: np.ndarray, factor: int) -> np.ndarray:
    """Mean of the finite values in each factor x factor block of the last two axes.

    Both trailing dimensions must be multiples of factor; all-NaN blocks give NaN.
    """
    *lead, height, width = array.shape
    blocks = array.reshape(*lead, height // factor, factor, width // factor, factor)
    finite = np.isfinite(blocks)
    counts = finite.sum(axis=(-3, -1))
    sums = np.where(finite, blocks, 0.0).sum(axis=(-3, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / counts, np.nan)


def downsample(src: MetricRaster, factor: int, method: str = "mean") -> MetricRaster:
    """
    Aggregate factor x factor blocks into one coarse cell.

    ``mean`` averages the valid cells of each block (all-nodata block -> nodata);
    ``nearest`` takes the block's centre cell. Partial blocks at the right and
    bottom edges are padded with nodata.
    """
    if factor < 1:
        raise InvalidParameterError("factor", f"must be >= 1, got {factor}")
    if method not in DOWNSAMPLE_METHODS:
        raise InvalidParameterError("method", f"expected one of {DOWNSAMPLE_METHODS}, got {method!r}")
    if factor == 1:
        return MetricRaster(src.grid, src.values.copy(), src.nodata_mask.copy(),
                            src.band_name, dict(src.metadata))

    height = -(-src.grid.height // factor)
    width = -(-src.grid.width // factor)
    padded = np.full((height * factor, width * factor), np.nan)
    padded[:src.grid.height, :src.grid.width] = src.values

    if method == "nearest":
        values = padded[factor // 2::factor, factor // 2::factor]
    else:
        values = block_nanmean(padded, factor)

    grid = GridSpec(src.grid.origin_x, src.grid.origin_y, src.grid.cell_size * factor,
                    width, height, src.grid.crs_code)
    return MetricRaster.from_values(grid, values, src.band_name,
                                    {**src.metadata, "downsample_method": method})


def resample(src: MetricRaster, target_cell: float, method: str = "bilinear") -> MetricRaster:
    """
    Resample to a cell size with an exact integer ratio to the source.

    Upsampling copies the containing coarse cell (nearest) or interpolates
    coarse cell centres (bilinear). Downsampling aggregates blocks: nearest
    keeps the centre cell, bilinear averages valid cells.

    Args:
        src: Source raster
        target_cell: Output cell size in meters
        method: "nearest" or "bilinear"

    Returns:
        Resampled raster; the method is recorded in its metadata
    """
    if method not in RESAMPLE_METHODS:
        raise InvalidParameterError("method", f"expected one of {RESAMPLE_METHODS}, got {method!r}")
    if not target_cell > 0:
        raise InvalidParameterError("target_cell", f"must be > 0, got {target_cell}")

    up = near_integer(src.grid.cell_size / target_cell)
    if up is not None and up >= 1:
        logger.debug("Upsampling '%s' by %d (%s)", src.band_name, up, method)
        if up == 1:
            return MetricRaster(src.grid, src.values.copy(), src.nodata_mask.copy(),
                                src.band_name, {**src.metadata, "resample_method": method})
        return _upsample(src, up, method)

    down = near_integer(target_cell / src.grid.cell_size)
    if down is not None and down >= 1:
        logger.debug("Downsampling '%s' by %d (%s)", src.band_name, down, method)
        result = downsample(src, down, "nearest" if method == "nearest" else "mean")
        result.metadata["resample_method"] = method
        return result

    raise ResampleError(
        f"cell sizes {src.grid.cell_size} and {target_cell} do not have an integer ratio"
    )


def align_to_reference(src: MetricRaster, ref: GridSpec) -> MetricRaster:
    """
    Place a raster on the reference grid's origin and extent.

    Equal cell sizes are a pure shift: reference cells outside the source become
    nodata and no value is interpolated. Other integer cell ratios are brought to
    the reference cell size first (nearest upsampling when the reference is
    finer, block mean when it is coarser).
    """
    if src.grid.crs_code != ref.crs_code:
        raise CrsMismatchError(src.grid.crs_code, ref.crs_code)
    coarse = max(src.grid.cell_size, ref.cell_size)
    if near_integer(coarse / min(src.grid.cell_size, ref.cell_size)) is None:
        raise ResampleError(
            f"cell sizes {src.grid.cell_size} and {ref.cell_size} do not have an integer ratio"
        )
    if not src.grid.is_alignment_compatible(ref):
        dx = (ref.origin_x - src.grid.origin_x) / coarse
        dy = (src.grid.origin_y - ref.origin_y) / coarse
        raise AlignmentError(dx - round(dx), dy - round(dy))

    working = src
    if near_integer(src.grid.cell_size / ref.cell_size) != 1:
        if ref.cell_size < src.grid.cell_size:
            working = resample(src, ref.cell_size, "nearest")
        else:
            working = downsample(src, near_integer(ref.cell_size / src.grid.cell_size), "mean")

    cell = ref.cell_size
    col_shift = near_integer((ref.origin_x - working.grid.origin_x) / cell)
    row_shift = near_integer((working.grid.origin_y - ref.origin_y) / cell)

    out = np.full(ref.shape, np.nan)
    # Overlap of reference rows/cols with the shifted source
    r_start, r_stop = max(0, -row_shift), min(ref.height, working.grid.height - row_shift)
    c_start, c_stop = max(0, -col_shift), min(ref.width, working.grid.width - col_shift)
    if r_start < r_stop and c_start < c_stop:
        out[r_start:r_stop, c_start:c_stop] = working.values[
            r_start + row_shift:r_stop + row_shift, c_start + col_shift:c_stop + col_shift
        ]
    logger.debug("Aligned '%s' with shift (%d rows, %d cols)", src.band_name, row_shift, col_shift)
    return MetricRaster.from_values(ref, out, src.band_name, dict(working.metadata))


def build_validity_mask(rasters: List[MetricRaster]) -> MaskRaster:
    """Valid where every raster holds a finite, non-nodata value."""
    if not rasters:
        raise InvalidParameterError("rasters", "at least one raster is required")
    grid = require_same_grid(rasters)
    valid = np.ones(grid.shape, dtype=bool)
    for raster in rasters:
        valid &= raster.valid & np.isfinite(raster.values)
    return MaskRaster(grid, valid)
