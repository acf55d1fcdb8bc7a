from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from utils.errors import GridMismatchError, InvalidParameterError
from utils.settings import DEFAULT_CRS

# Tolerance, in cells, when testing whether an offset or ratio is integral
INTEGRAL_TOLERANCE = 1e-9

BAND_NAMES = ("chm", "pai", "fhd", "p05", "p50", "p95")


def near_integer(value: float, tolerance: float = INTEGRAL_TOLERANCE) -> Optional[int]:
    """Return the integer nearest to value, or None when it is not integral."""
    nearest = round(value)
    if abs(value - nearest) <= tolerance * max(1.0, abs(value)):
        return int(nearest)
    return None


@dataclass(frozen=True)
class GridSpec:
    """A north-up grid anchored at its top-left corner, rows running top to bottom."""
    origin_x: float
    origin_y: float
    cell_size: float
    width: int
    height: int
    crs_code: int = DEFAULT_CRS

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InvalidParameterError("cell_size", f"must be > 0, got {self.cell_size}")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError(
                "grid dimensions", f"width and height must be >= 1, got {self.width}x{self.height}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y) of the grid extent."""
        return (
            self.origin_x,
            self.origin_y - self.height * self.cell_size,
            self.origin_x + self.width * self.cell_size,
            self.origin_y,
        )

    @classmethod
    def covering(cls, bounds: Tuple[float, float, float, float], cell_size: float,
                 crs_code: int = DEFAULT_CRS) -> 'GridSpec':
        """Smallest grid enclosing bounds whose origin lies on a whole multiple of cell_size."""
        if not cell_size > 0:
            raise InvalidParameterError("cell_size", f"must be > 0, got {cell_size}")
        min_x, min_y, max_x, max_y = bounds
        col0 = int(np.floor(min_x / cell_size))
        if col0 * cell_size > min_x:
            col0 -= 1
        row0 = int(np.ceil(max_y / cell_size))
        if row0 * cell_size < max_y:
            row0 += 1
        origin_x = col0 * cell_size
        origin_y = row0 * cell_size
        width = max(1, int(np.ceil((max_x - origin_x) / cell_size)))
        height = max(1, int(np.ceil((origin_y - min_y) / cell_size)))
        return cls(origin_x, origin_y, cell_size, width, height, crs_code)

    def cell_index(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map coordinates to (rows, cols, inside) where inside flags points on the grid.

        Points lying exactly on the right or bottom edge belong to the last column/row.
        """
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        col_f = (xs - self.origin_x) / self.cell_size
        row_f = (self.origin_y - ys) / self.cell_size
        inside = (col_f >= 0) & (col_f <= self.width) & (row_f >= 0) & (row_f <= self.height)
        cols = np.clip(np.floor(col_f), 0, self.width - 1).astype(np.int64)
        rows = np.clip(np.floor(row_f), 0, self.height - 1).astype(np.int64)
        return rows, cols, inside

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cell centre coordinates as two (height, width) arrays."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def is_alignment_compatible(self, other: 'GridSpec') -> bool:
        """True when cell sizes have an integer ratio and origins differ by whole coarse cells."""
        coarse = max(self.cell_size, other.cell_size)
        fine = min(self.cell_size, other.cell_size)
        if near_integer(coarse / fine) is None:
            return False
        return (near_integer((self.origin_x - other.origin_x) / coarse) is not None
                and near_integer((self.origin_y - other.origin_y) / coarse) is not None)

    def with_cell_size(self, cell_size: float) -> 'GridSpec':
        """Same extent at a different (integer-ratio) cell size."""
        width = int(round(self.width * self.cell_size / cell_size))
        height = int(round(self.height * self.cell_size / cell_size))
        return GridSpec(self.origin_x, self.origin_y, cell_size, width, height, self.crs_code)

    def window(self, row0: int, col0: int, height: int, width: int) -> 'GridSpec':
        """Sub-grid starting at pixel (row0, col0)."""
        return GridSpec(
            self.origin_x + col0 * self.cell_size,
            self.origin_y - row0 * self.cell_size,
            self.cell_size, width, height, self.crs_code,
        )

    def to_dict(self) -> Dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "cell_size": self.cell_size,
            "width": self.width,
            "height": self.height,
            "crs": self.crs_code,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'GridSpec':
        return cls(
            origin_x=float(data["origin_x"]),
            origin_y=float(data["origin_y"]),
            cell_size=float(data["cell_size"]),
            width=int(data["width"]),
            height=int(data["height"]),
            crs_code=int(data.get("crs", DEFAULT_CRS)),
        )


@dataclass
class MetricRaster:
    """A single georeferenced float band. Masked cells hold NaN in values."""
    grid: GridSpec
    values: np.ndarray
    nodata_mask: np.ndarray
    band_name: str = "chm"
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
        if self.values.shape != self.grid.shape or self.nodata_mask.shape != self.grid.shape:
            raise GridMismatchError(
                f"band '{self.band_name}': array shape {self.values.shape} does not match "
                f"grid {self.grid.shape}"
            )
        # Non-finite values are nodata; nodata is NaN
        self.nodata_mask = self.nodata_mask | ~np.isfinite(self.values)
        if self.nodata_mask.any():
            self.values = np.where(self.nodata_mask, np.nan, self.values)

    @classmethod
    def from_values(cls, grid: GridSpec, values: np.ndarray, band_name: str = "chm",
                    metadata: Optional[Dict[str, str]] = None) -> 'MetricRaster':
        """Build a raster whose nodata mask is derived from non-finite values."""
        values = np.asarray(values, dtype=np.float64)
        return cls(grid, values, ~np.isfinite(values), band_name, dict(metadata or {}))

    @property
    def valid(self) -> np.ndarray:
        return ~self.nodata_mask

    def renamed(self, band_name: str) -> 'MetricRaster':
        return MetricRaster(self.grid, self.values.copy(), self.nodata_mask.copy(),
                            band_name, dict(self.metadata))


@dataclass
class MaskRaster:
    """Per-cell validity flags (True = usable)."""
    grid: GridSpec
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.grid.shape:
            raise GridMismatchError(
                f"mask shape {self.valid.shape} does not match grid {self.grid.shape}"
            )

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())
