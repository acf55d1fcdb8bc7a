import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.raster_model import GridSpec, MetricRaster
from models.window_model import WindowPlan
from utils.errors import DimensionError, InvalidParameterError
from utils.settings import DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE

logger = logging.getLogger(__name__)

BLEND_MODES = ("hann", "mean")
WEIGHT_FLOOR = 1e-3


def _axis_offsets(dim: int, window: int, stride: int) -> List[int]:
    offsets = list(range(0, dim - window + 1, stride))
    if offsets[-1] != dim - window:
        offsets.append(dim - window)
    return offsets


def plan_windows(tile_dims: Tuple[int, int], window: int = DEFAULT_PATCH_SIZE,
                 overlap: int = DEFAULT_OVERLAP) -> WindowPlan:
    """
    Cover a tile with square windows stepping by window - overlap.

    The last window along each axis is clamped to end at the tile edge.
    """
    if window < 1:
        raise InvalidParameterError("window", f"must be >= 1, got {window}")
    if not 0 <= overlap < window:
        raise InvalidParameterError("overlap", f"must lie in [0, {window}), got {overlap}")
    height, width = tile_dims
    if height < window or width < window:
        raise DimensionError(f"tile {height}x{width} is smaller than the {window} px window")

    stride = window - overlap
    rows = _axis_offsets(height, window, stride)
    cols = _axis_offsets(width, window, stride)
    windows = [(r, c) for r in rows for c in cols]
    logger.debug("Planned %d windows (%d x %d) over %dx%d", len(windows), len(rows), len(cols), height, width)
    return WindowPlan(windows, window, overlap, (height, width))


def window_weights(window: int, mode: str = "hann") -> np.ndarray:
    """Separable raised-cosine weights sin²(π(i + 0.5)/N), floored at 1e-3; ones for ``mean``."""
    if mode not in BLEND_MODES:
        raise InvalidParameterError("mode", f"expected one of {BLEND_MODES}, got {mode!r}")
    if mode == "mean":
        return np.ones((window, window))
    taper = np.sin(np.pi * (np.arange(window) + 0.5) / window) ** 2
    return np.maximum(np.outer(taper, taper), WEIGHT_FLOOR)


def accumulated_weights(plan: WindowPlan, mode: str = "hann") -> np.ndarray:
    """Per-pixel sum of window weights over the plan."""
    weights = window_weights(plan.window_size, mode)
    total = np.zeros(plan.tile_dims)
    size = plan.window_size
    for row0, col0 in plan.windows:
        total[row0:row0 + size, col0:col0 + size] += weights
    return total


def _reference(plan: WindowPlan, preds: Sequence[np.ndarray]) -> np.ndarray:
    """First finite contribution per pixel, in plan order."""
    reference = np.full(plan.tile_dims, np.nan)
    size = plan.window_size
    for (row0, col0), pred in zip(plan.windows, preds):
        region = reference[row0:row0 + size, col0:col0 + size]
        fill = np.isnan(region) & np.isfinite(pred)
        region[fill] = pred[fill]
    return reference


def _accumulate(plan: WindowPlan, preds: Sequence[np.ndarray], indices: Sequence[int],
                weights: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    numerator = np.zeros(plan.tile_dims)
    denominator = np.zeros(plan.tile_dims)
    size = plan.window_size
    for index in indices:
        row0, col0 = plan.windows[index]
        pred = preds[index]
        window = (slice(row0, row0 + size), slice(col0, col0 + size))
        finite = np.isfinite(pred)
        w = np.where(finite, weights, 0.0)
        numerator[window] += np.where(finite, w * (pred - reference[window]), 0.0)
        denominator[window] += w
    return numerator, denominator


def blend_stitch(plan: WindowPlan, window_preds: Sequence[np.ndarray], grid: Optional[GridSpec] = None,
                 band_name: str = "chm", mode: str = "hann", deterministic: bool = True,
                 threads: int = 1) -> MetricRaster:
    """
    Blend overlapping window predictions into one tile raster.

    Each pixel is the weighted average of its contributing windows,
    accumulated as deviations from the first contribution so that windows
    agreeing on a value reproduce it exactly. NaN predictions contribute
    nothing.

    Args:
        plan: Window plan the predictions follow (one array per window, in order)
        window_preds: window_size x window_size arrays
        grid: Georeferencing of the tile; a unit pixel grid if omitted
        band_name: Band label of the result
        mode: ``hann`` or ``mean`` weighting
        deterministic: Accumulate sequentially in plan order (bit-reproducible)
        threads: Worker threads when not deterministic

    Returns:
        Stitched MetricRaster
    """
    if len(window_preds) != len(plan):
        raise DimensionError(f"plan has {len(plan)} windows but {len(window_preds)} predictions were given")
    size = plan.window_size
    preds = [np.asarray(p, dtype=np.float64) for p in window_preds]
    for (row0, col0), pred in zip(plan.windows, preds):
        if pred.shape != (size, size):
            raise DimensionError(f"window ({row0}, {col0}) prediction has shape {pred.shape}, expected {(size, size)}")
    if grid is None:
        grid = GridSpec(0.0, 0.0, 1.0, plan.tile_dims[1], plan.tile_dims[0])
    elif grid.shape != tuple(plan.tile_dims):
        raise DimensionError(f"grid shape {grid.shape} differs from plan tile dims {tuple(plan.tile_dims)}")

    weights = window_weights(size, mode)
    reference = _reference(plan, preds)
    indices = list(range(len(plan)))
    if deterministic or threads <= 1:
        numerator, denominator = _accumulate(plan, preds, indices, weights, reference)
    else:
        chunks = [indices[i::threads] for i in range(threads) if indices[i::threads]]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(lambda chunk: _accumulate(plan, preds, chunk, weights, reference), chunks))
        numerator = sum(p[0] for p in partials)
        denominator = sum(p[1] for p in partials)

    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(denominator > 0, reference + numerator / denominator, np.nan)
    logger.debug("Stitched %d windows into '%s' (%s weighting)", len(plan), band_name, mode)
    metadata = {"blend_mode": mode, "overlap": str(plan.overlap), "window_size": str(size)}
    return MetricRaster.from_values(grid, values, band_name, metadata)


def stitch_bands(plan: WindowPlan, band_preds: Dict[str, Sequence[np.ndarray]],
                 grid: Optional[GridSpec] = None, mode: str = "hann", deterministic: bool = True,
                 threads: int = 1) -> Dict[str, MetricRaster]:
    """Stitch several bands (e.g. chm, pai, fhd) over the same plan."""
    return {
        band: blend_stitch(plan, preds, grid, band, mode, deterministic, threads)
        for band, preds in band_preds.items()
    }
