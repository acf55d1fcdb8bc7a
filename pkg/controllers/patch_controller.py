import logging
from typing import Dict, Optional

import numpy as np

from controllers.raster_controller import block_nanmean, grids_match, require_same_grid
from models.metrics_model import PadGrid
from models.patch_model import Patch, PatchSet
from models.raster_model import GridSpec, MaskRaster, MetricRaster
from utils.errors import DimensionError, GridMismatchError, InvalidParameterError
from utils.settings import DEFAULT_CANOPY_HEIGHT, DEFAULT_PAD_FACTOR, DEFAULT_PATCH_SIZE

logger = logging.getLogger(__name__)


def reduce_pad_profiles(pad: PadGrid, patch_window: GridSpec, factor: int = DEFAULT_PAD_FACTOR) -> np.ndarray:
    """
    Cut the PAD profile under a patch window and reduce it spatially.

    Each patch pixel takes the profile of the PAD cell containing its centre
    (pixels outside the PAD grid or over cells without returns are nodata).
    The result is then block-averaged over factor x factor pixels per layer,
    skipping nodata pixels; an all-nodata block stays NaN.

    Args:
        pad: PAD grid, typically at 1 m
        patch_window: Patch footprint at the patch resolution
        factor: Spatial reduction factor; must divide the window size

    Returns:
        Array of shape (layers, height / factor, width / factor)
    """
    if factor < 1:
        raise InvalidParameterError("pad_factor", f"must be >= 1, got {factor}")
    if patch_window.height % factor or patch_window.width % factor:
        raise InvalidParameterError(
            "pad_factor",
            f"{factor} does not divide the {patch_window.height}x{patch_window.width} patch window",
        )
    if pad.grid.crs_code != patch_window.crs_code:
        raise GridMismatchError(
            f"PAD grid is EPSG:{pad.grid.crs_code}, patch window is EPSG:{patch_window.crs_code}"
        )

    xs, ys = patch_window.cell_centers()
    rows, cols, inside = pad.grid.cell_index(xs, ys)
    usable = inside & pad.valid[rows, cols]
    profile = np.moveaxis(pad.pad[rows, cols, :], -1, 0)
    profile = np.where(usable[np.newaxis], profile, np.nan)
    if factor == 1:
        return profile
    return block_nanmean(profile, factor)


def extract_patches(tile: Dict[str, MetricRaster], mask: MaskRaster,
                    patch: int = DEFAULT_PATCH_SIZE, stride: Optional[int] = None,
                    pad: Optional[PadGrid] = None, pad_factor: int = DEFAULT_PAD_FACTOR,
                    tile_id: str = "tile") -> PatchSet:
    """
    Slice co-registered tile rasters into square patches.

    Windows start at multiples of ``stride`` and lie fully inside the tile;
    partial windows at the right and bottom edges are dropped.

    Args:
        tile: Band name -> raster (targets and optional imagery), all on one grid
        mask: Per-pixel validity on the same grid
        patch: Patch edge length in pixels
        stride: Window step in pixels (defaults to ``patch``)
        pad: Optional PAD grid to cut reduced profile targets from
        pad_factor: Spatial reduction applied to PAD profiles
        tile_id: Label carried by every patch

    Returns:
        PatchSet in row-major window order
    """
    if not tile:
        raise InvalidParameterError("tile", "at least one raster is required")
    stride = patch if stride is None else stride
    if stride < 1:
        raise InvalidParameterError("stride", f"must be >= 1, got {stride}")
    if patch < 1:
        raise InvalidParameterError("patch", f"must be >= 1, got {patch}")

    grid = require_same_grid(list(tile.values()))
    if not grids_match(grid, mask.grid):
        raise GridMismatchError(f"mask grid {mask.grid.to_dict()} differs from raster grid {grid.to_dict()}")
    if patch > grid.height or patch > grid.width:
        raise DimensionError(f"patch {patch} is larger than the {grid.height}x{grid.width} tile")

    patches = []
    for row0 in range(0, grid.height - patch + 1, stride):
        for col0 in range(0, grid.width - patch + 1, stride):
            window = (slice(row0, row0 + patch), slice(col0, col0 + patch))
            profile = None
            if pad is not None:
                profile = reduce_pad_profiles(pad, grid.window(row0, col0, patch, patch), pad_factor)
            patches.append(Patch(
                tile_id=tile_id,
                row0=row0,
                col0=col0,
                channels={band: raster.values[window].copy() for band, raster in tile.items()},
                valid=mask.valid[window].copy(),
                pad_profile=profile,
                pad_factor=pad_factor if pad is not None else None,
            ))

    logger.debug("Tile %s: %d patches of %d px at stride %d", tile_id, len(patches), patch, stride)
    metadata = {"tile_id": tile_id}
    if pad is not None:
        metadata["pad_factor"] = str(pad_factor)
    return PatchSet(patches, grid, stride, 0.0, patch, metadata)


def canopy_fraction(patch: Patch, band: str = "chm", height: float = DEFAULT_CANOPY_HEIGHT) -> float:
    """Share of a patch's valid pixels whose band value exceeds height."""
    valid = patch.valid
    if not valid.any():
        return 0.0
    values = patch.channels[band][valid]
    return float((values > height).sum() / values.size)


def filter_patches(patch_set: PatchSet, min_valid_fraction: float,
                   min_canopy_fraction: Optional[float] = None, canopy_band: str = "chm",
                   canopy_height: float = DEFAULT_CANOPY_HEIGHT) -> PatchSet:
    """
    Keep patches whose valid fraction reaches the threshold (inclusive).

    With ``min_canopy_fraction`` set, patches must also have at least that
    share of valid pixels above ``canopy_height`` in ``canopy_band``.
    """
    for name, value in (("min_valid_fraction", min_valid_fraction),
                        ("min_canopy_fraction", min_canopy_fraction)):
        if value is not None and not 0.0 <= value <= 1.0:
            raise InvalidParameterError(name, f"must lie in [0, 1], got {value}")

    kept = [p for p in patch_set if p.valid_fraction >= min_valid_fraction]
    if min_canopy_fraction is not None:
        missing = [p.name for p in kept if canopy_band not in p.channels]
        if missing:
            raise InvalidParameterError("canopy_band", f"band '{canopy_band}' missing from patch {missing[0]}")
        kept = [p for p in kept
                if canopy_fraction(p, canopy_band, canopy_height) >= min_canopy_fraction]

    logger.info("Kept %d of %d patches (min valid fraction %.2f)",
                len(kept), len(patch_set), min_valid_fraction)
    metadata = dict(patch_set.metadata)
    metadata["min_valid_fraction"] = str(min_valid_fraction)
    if min_canopy_fraction is not None:
        metadata["min_canopy_fraction"] = str(min_canopy_fraction)
        metadata["canopy_height"] = str(canopy_height)
    return PatchSet(kept, patch_set.source_grid, patch_set.stride,
                    min_valid_fraction, patch_set.patch_size, metadata)
