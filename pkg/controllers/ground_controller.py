import logging
from typing import Dict, Tuple

import numpy as np
from scipy.spatial import cKDTree

from models.pointcloud_model import DensitySummary, GroundGrid, HagCloud, PointCloud
from models.raster_model import GridSpec, MetricRaster
from controllers.raster_controller import bilinear_sample
from utils.errors import CoverageError, InvalidParameterError

logger = logging.getLogger(__name__)

IDW_POWER = 2.0
IDW_NEIGHBOURS = 8
DEFAULT_MAX_HEIGHT = 60.0


def build_ground_grid(cloud: PointCloud, cell_size: float = 1.0,
                      neighbours: int = IDW_NEIGHBOURS, power: float = IDW_POWER) -> GroundGrid:
    """
    Build a ground elevation grid from ground-classified returns.

    Observed cells take the minimum z of their class-2 returns. Empty cells are
    filled by inverse-distance weighting (power 2) from the nearest observed
    cell centres. A cloud without any ground returns falls back to the per-cell
    minimum of all returns.

    Args:
        cloud: Non-empty point cloud
        cell_size: Ground cell size in meters
        neighbours: Number of observed cells used for each fill
        power: IDW distance exponent

    Returns:
        GroundGrid covering the cloud bounds
    """
    cloud.require_points()
    if not cell_size > 0:
        raise InvalidParameterError("cell_size", f"must be > 0, got {cell_size}")

    grid = GridSpec.covering(cloud.bounds, cell_size, cloud.crs_code)
    rows, cols, _ = grid.cell_index(cloud.x, cloud.y)
    flat = rows * grid.width + cols

    selection = cloud.ground_mask
    used_all_points = not selection.any()
    if used_all_points:
        logger.warning("No ground-classified returns; using the per-cell minimum of all returns")
        selection = np.ones(len(cloud), dtype=bool)

    elevation = np.full(grid.width * grid.height, np.inf)
    np.minimum.at(elevation, flat[selection], cloud.z[selection])
    observed = np.isfinite(elevation)
    filled = ~observed

    if filled.any():
        xs, ys = grid.cell_centers()
        centres = np.column_stack([xs.ravel(), ys.ravel()])
        tree = cKDTree(centres[observed])
        k = min(neighbours, int(observed.sum()))
        distances, indices = tree.query(centres[filled], k=k)
        distances = distances.reshape(-1, k)
        indices = indices.reshape(-1, k)
        known = elevation[observed][indices]
        weights = 1.0 / distances ** power
        # Deviations from the nearest observed cell keep uniform neighbourhoods exact
        nearest = known[:, :1]
        elevation[filled] = nearest[:, 0] + (weights * (known - nearest)).sum(axis=1) / weights.sum(axis=1)
        logger.debug("Filled %d of %d ground cells by IDW (k=%d)", int(filled.sum()), filled.size, k)

    return GroundGrid(
        grid=grid,
        elevation=elevation.reshape(grid.shape),
        filled_mask=filled.reshape(grid.shape),
        used_all_points=used_all_points,
    )


def compute_hag(cloud: PointCloud, ground: GroundGrid,
                max_height: float = DEFAULT_MAX_HEIGHT) -> HagCloud:
    """
    Convert returns to height above ground.

    Ground elevation is bilinearly interpolated at each return. Negative heights
    are clamped to zero and returns above ``max_height`` are dropped; both counts
    are kept on the result.
    """
    if not max_height > 0:
        raise InvalidParameterError("max_height", f"must be > 0, got {max_height}")
    _, _, inside = ground.grid.cell_index(cloud.x, cloud.y)
    if not inside.all():
        outside = int((~inside).sum())
        raise CoverageError(
            f"{outside} points fall outside the ground grid extent {ground.grid.bounds}"
        )

    surface = MetricRaster.from_values(ground.grid, ground.elevation, "ground")
    hag = cloud.z - bilinear_sample(surface, cloud.x, cloud.y)

    below = hag < 0
    clamped = int(below.sum())
    hag[below] = 0.0
    keep = hag <= max_height
    dropped = int((~keep).sum())
    if clamped or dropped:
        logger.info("HAG: clamped %d returns below ground, dropped %d above %.1f m",
                    clamped, dropped, max_height)

    return HagCloud(
        x=cloud.x[keep],
        y=cloud.y[keep],
        hag=hag[keep],
        source_bounds=cloud.bounds,
        max_height=max_height,
        clamped_count=clamped,
        dropped_count=dropped,
    )


def points_per_square_meter(count: int, bounds: Tuple[float, float, float, float]) -> float:
    """Point count divided by the bounding-box area."""
    min_x, min_y, max_x, max_y = bounds
    area = (max_x - min_x) * (max_y - min_y)
    if not area > 0:
        raise InvalidParameterError("bounds", f"bounding box {bounds} has zero area")
    return count / area


def point_density(cloud: PointCloud) -> float:
    return points_per_square_meter(len(cloud), cloud.bounds)


def density_summary(densities: Dict[str, float]) -> DensitySummary:
    """Mean, minimum and maximum density across tiles."""
    if not densities:
        raise InvalidParameterError("densities", "at least one tile is required")
    values = np.array(list(densities.values()), dtype=np.float64)
    return DensitySummary(
        mean=float(values.mean()),
        minimum=float(values.min()),
        maximum=float(values.max()),
        tiles=dict(densities),
    )
