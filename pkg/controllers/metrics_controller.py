"""Canopy structure metrics on a regular grid.

Vertical profiles follow the Beer-Lambert (MacArthur-Horn) discretisation:
returns are binned into height layers, pulse counts entering and leaving each
layer are taken as cumulative return counts from the top, and

    PAD_i = ln(S_e / S_t) / (k * dz)

Planar metrics are derived from the profile (PAI, FHD) or directly from the
returns (CHM, height percentiles).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence

import numpy as np

from models.metrics_model import PadGrid, PadParams, ReturnHistogramGrid
from models.pointcloud_model import HagCloud
from models.raster_model import GridSpec, MetricRaster
from utils.errors import CoverageError, InvalidParameterError
from utils.settings import DEFAULT_PERCENTILES

logger = logging.getLogger(__name__)

ROW_BLOCK = 64
FHD_BASES = ("pad", "returns")

# Relative tolerance for snapping a height onto a layer boundary
LAYER_SNAP_TOLERANCE = 1e-9


def _run_row_blocks(height: int, work: Callable[[slice], None], threads: int = 1) -> None:
    """Apply work to consecutive row slices, optionally on a thread pool.

    Each block writes a disjoint slice of its output, so results do not depend
    on the thread count.
    """
    blocks = [slice(start, min(start + ROW_BLOCK, height)) for start in range(0, height, ROW_BLOCK)]
    if threads <= 1 or len(blocks) == 1:
        for block in blocks:
            work(block)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, blocks))


def _layer_index(hag: np.ndarray, dz: float) -> np.ndarray:
    """Layer of each height; values on a boundary go to the layer above."""
    q = hag / dz
    nearest = np.rint(q)
    q = np.where(np.abs(q - nearest) <= LAYER_SNAP_TOLERANCE * np.maximum(1.0, np.abs(q)), nearest, q)
    return np.floor(q).astype(np.int64)


def _cells_on_grid(xs: np.ndarray, ys: np.ndarray, grid: GridSpec, strict: bool) -> np.ndarray:
    """Flat cell index per point; -1 for points off the grid when not strict."""
    rows, cols, inside = grid.cell_index(xs, ys)
    if not inside.all():
        outside = int((~inside).sum())
        if strict:
            raise CoverageError(f"{outside} points fall outside the metric grid {grid.bounds}")
        logger.warning("Ignoring %d points outside the metric grid", outside)
    return np.where(inside, rows * grid.width + cols, -1)


def bin_returns(hag: HagCloud, grid: GridSpec, params: PadParams = PadParams()) -> ReturnHistogramGrid:
    """
    Count returns per grid cell and height layer.

    Layer i covers [i*dz, (i+1)*dz); a height equal to max_height lands in the
    top layer. Returns above max_height are not counted.
    """
    flat = _cells_on_grid(hag.x, hag.y, grid, strict=True)
    n_layers = params.n_layers
    layers = _layer_index(hag.hag, params.dz)
    if (layers < 0).any():
        raise InvalidParameterError("hag", f"{int((layers < 0).sum())} returns lie below ground")
    at_top = hag.hag == params.max_height
    layers[at_top] = n_layers - 1
    keep = layers < n_layers
    if not keep.all():
        logger.warning("Skipping %d returns above max_height %.1f m",
                       int((~keep).sum()), params.max_height)

    counts = np.zeros(grid.width * grid.height * n_layers, dtype=np.int32)
    np.add.at(counts, flat[keep] * n_layers + layers[keep], 1)
    counts = counts.reshape(grid.height, grid.width, n_layers)
    return ReturnHistogramGrid(grid=grid, counts=counts,
                               total_per_cell=counts.sum(axis=-1, dtype=np.int64))


def compute_pad(hist: ReturnHistogramGrid, params: PadParams = PadParams(),
                threads: int = 1) -> PadGrid:
    """
    Plant Area Density per layer from a return histogram.

    S_e(i) counts returns at or above the layer's lower bound and S_t(i) those at
    or above its upper bound. A layer with S_t = 0 but S_e > 0 is fully
    occluding: S_t is clamped to 1 and the layer flagged saturated. Layers with
    S_e = 0 hold PAD 0.

    Args:
        hist: Return histogram with params.n_layers layers
        params: Extinction coefficient and layer geometry
        threads: Worker threads for row blocks (result is identical for any value)

    Returns:
        PadGrid in m²/m³
    """
    if hist.n_layers != params.n_layers:
        raise InvalidParameterError(
            "dz", f"histogram has {hist.n_layers} layers but params imply {params.n_layers}"
        )
    shape = hist.counts.shape
    pad = np.zeros(shape, dtype=np.float64)
    saturated = np.zeros(shape, dtype=bool)
    scale = params.k * params.dz

    def work(rows: slice) -> None:
        counts = hist.counts[rows].astype(np.int64)
        entering = np.cumsum(counts[..., ::-1], axis=-1)[..., ::-1]
        exiting = np.zeros_like(entering)
        exiting[..., :-1] = entering[..., 1:]
        occluding = (exiting == 0) & (entering > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = entering / np.maximum(exiting, 1)
            pad[rows] = np.where(entering > 0, np.log(ratio) / scale, 0.0)
        saturated[rows] = occluding

    _run_row_blocks(shape[0], work, threads)
    n_saturated = int(saturated.sum())
    if n_saturated:
        logger.info("PAD: %d saturated layers clamped (S_t = 0)", n_saturated)
    return PadGrid(
        grid=hist.grid,
        pad=pad,
        saturated_mask=saturated,
        params=params,
        total_per_cell=hist.total_per_cell,
        return_counts=hist.counts,
    )


def compute_pai(pad: PadGrid) -> MetricRaster:
    """Plant Area Index: the layer sum of PAD; nodata where a cell had no returns."""
    values = pad.pad.sum(axis=-1)
    nodata = ~pad.valid
    return MetricRaster(pad.grid, np.where(nodata, np.nan, values), nodata, "pai")


def compute_fhd(pad: PadGrid, basis: str = "pad", threads: int = 1) -> MetricRaster:
    """
    Foliage Height Diversity: Shannon entropy of the vertical distribution.

    Proportions are taken over PAD (default) or, with basis="returns", over the
    per-layer return counts. FHD is 0 when at most one layer is non-zero.
    """
    if basis not in FHD_BASES:
        raise InvalidParameterError("basis", f"expected one of {FHD_BASES}, got {basis!r}")
    if basis == "returns" and pad.return_counts is None:
        raise InvalidParameterError("basis", "PadGrid carries no return counts")
    source = pad.pad if basis == "pad" else pad.return_counts
    fhd = np.zeros(pad.grid.shape, dtype=np.float64)

    def work(rows: slice) -> None:
        weights = source[rows].astype(np.float64)
        total = weights.sum(axis=-1, keepdims=True)
        positive = weights > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(positive, weights / total, 1.0)
            entropy = -np.where(positive, p * np.log(p), 0.0).sum(axis=-1)
        degenerate = positive.sum(axis=-1) <= 1
        fhd[rows] = np.where(degenerate, 0.0, entropy)

    _run_row_blocks(pad.grid.height, work, threads)
    nodata = ~pad.valid
    return MetricRaster(pad.grid, np.where(nodata, np.nan, fhd), nodata, "fhd")


def compute_chm(hag: HagCloud, grid: GridSpec) -> MetricRaster:
    """Canopy Height Model: maximum height above ground per cell."""
    flat = _cells_on_grid(hag.x, hag.y, grid, strict=False)
    on_grid = flat >= 0
    chm = np.full(grid.width * grid.height, -np.inf)
    np.maximum.at(chm, flat[on_grid], hag.hag[on_grid])
    nodata = ~np.isfinite(chm)
    chm[nodata] = np.nan
    return MetricRaster(grid, chm.reshape(grid.shape), nodata.reshape(grid.shape), "chm")


def percentile_band_name(fraction: float) -> str:
    return f"p{int(round(fraction * 100)):02d}"


def compute_percentiles(hag: HagCloud, grid: GridSpec,
                        percentiles: Sequence[float] = DEFAULT_PERCENTILES) -> List[MetricRaster]:
    """
    Per-cell height percentiles by linear interpolation between order statistics.

    For n heights sorted ascending the percentile p sits at rank h = (n - 1) * p.
    """
    for fraction in percentiles:
        if not 0 < fraction < 1:
            raise InvalidParameterError("percentiles", f"fractions must lie in (0, 1), got {fraction}")

    flat = _cells_on_grid(hag.x, hag.y, grid, strict=False)
    on_grid = flat >= 0
    cells = flat[on_grid]
    heights = hag.hag[on_grid]
    order = np.lexsort((heights, cells))
    sorted_heights = heights[order]

    n_cells = grid.width * grid.height
    counts = np.bincount(cells, minlength=n_cells)
    starts = np.cumsum(counts) - counts
    occupied = counts > 0
    n = counts[occupied]
    base = starts[occupied]

    rasters = []
    for fraction in percentiles:
        rank = (n - 1) * fraction
        lower = np.floor(rank).astype(np.int64)
        upper = np.minimum(lower + 1, n - 1)
        a = sorted_heights[base + lower]
        b = sorted_heights[base + upper]
        values = np.full(n_cells, np.nan)
        values[occupied] = a + (rank - lower) * (b - a)
        rasters.append(MetricRaster(grid, values.reshape(grid.shape),
                                    ~occupied.reshape(grid.shape), percentile_band_name(fraction)))
    return rasters


def compute_all(hag: HagCloud, grid: GridSpec, params: PadParams,
                percentiles: Iterable[float] = DEFAULT_PERCENTILES,
                fhd_basis: str = "pad", threads: int = 1):
    """Every planar metric plus the PAD grid they were derived from."""
    pad = compute_pad(bin_returns(hag, grid, params), params, threads)
    rasters = [compute_chm(hag, grid), compute_pai(pad), compute_fhd(pad, fhd_basis, threads)]
    rasters.extend(compute_percentiles(hag, grid, list(percentiles)))
    return rasters, pad
