from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from models.raster_model import GridSpec
from utils.errors import EmptyCloudError, InvalidParameterError
from utils.settings import DEFAULT_CRS

GROUND_CLASS = 2
UNCLASSIFIED = 1

Bounds = Tuple[float, float, float, float]


@dataclass(frozen=True)
class PointRecord:
    """One LiDAR return."""
    x: float
    y: float
    z: float
    classification: int = UNCLASSIFIED
    return_number: int = 1
    intensity: Optional[int] = None

    def to_dict(self) -> Dict:
        return {
            "x": self.x,
            "y": self.y,
            "z": self.z,
            "classification": self.classification,
            "return_number": self.return_number,
            "intensity": self.intensity,
        }


@dataclass
class PointCloud:
    """Parsed LiDAR returns held column-wise.

    Columns are parallel numpy arrays; ``records()`` yields PointRecord views.
    """
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    classification: np.ndarray
    return_number: np.ndarray
    bounds: Bounds
    crs_code: int = DEFAULT_CRS
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.classification = np.asarray(self.classification, dtype=np.int64)
        self.return_number = np.asarray(self.return_number, dtype=np.int64)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.int64)
        self.bounds = tuple(float(v) for v in self.bounds)

    @classmethod
    def from_arrays(cls, x, y, z, classification=None, return_number=None,
                    intensity=None, crs_code: int = DEFAULT_CRS) -> 'PointCloud':
        """Build a cloud whose bounds are computed from the data."""
        x = np.asarray(x, dtype=np.float64)
        n = x.size
        if classification is None:
            classification = np.full(n, UNCLASSIFIED)
        if return_number is None:
            return_number = np.ones(n, dtype=np.int64)
        return cls(x, y, z, classification, return_number,
                   bounds_of(x, np.asarray(y, dtype=np.float64)), crs_code, intensity)

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def require_points(self) -> None:
        if self.is_empty:
            raise EmptyCloudError("point cloud contains no points")

    def records(self) -> Iterator[PointRecord]:
        for i in range(len(self)):
            yield PointRecord(
                float(self.x[i]), float(self.y[i]), float(self.z[i]),
                int(self.classification[i]), int(self.return_number[i]),
                None if self.intensity is None else int(self.intensity[i]),
            )

    @property
    def ground_mask(self) -> np.ndarray:
        return self.classification == GROUND_CLASS


def bounds_of(x: np.ndarray, y: np.ndarray) -> Bounds:
    if x.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(x.min()), float(y.min()), float(x.max()), float(y.max()))


@dataclass
class GroundGrid:
    """Per-cell ground elevation.

    ``filled_mask`` marks interpolated cells; ``used_all_points`` is set when the
    cloud had no ground-classified returns and cell minima of all returns were used.
    """
    grid: GridSpec
    elevation: np.ndarray
    filled_mask: np.ndarray
    used_all_points: bool = False


@dataclass
class HagCloud:
    """Returns expressed as height above ground."""
    x: np.ndarray
    y: np.ndarray
    hag: np.ndarray
    source_bounds: Bounds
    max_height: float = 60.0
    clamped_count: int = 0
    dropped_count: int = 0

    def __post_init__(self):
        if not self.max_height > 0:
            raise InvalidParameterError("max_height", f"must be > 0, got {self.max_height}")
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.hag = np.asarray(self.hag, dtype=np.float64)
        if not self.x.shape == self.y.shape == self.hag.shape:
            raise InvalidParameterError(
                "hag", f"x, y and hag lengths differ: {self.x.size}, {self.y.size}, {self.hag.size}"
            )
        below = ~(self.hag >= 0)
        if below.any():
            raise InvalidParameterError(
                "hag", f"{int(below.sum())} heights are negative or NaN"
            )

    def __len__(self) -> int:
        return int(self.hag.size)

    def points(self) -> Iterator[Tuple[float, float, float]]:
        return zip(self.x.tolist(), self.y.tolist(), self.hag.tolist())


@dataclass
class DensitySummary:
    """Point density statistics across one or more tiles (points/m²)."""
    mean: float
    minimum: float
    maximum: float
    tiles: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"mean": self.mean, "min": self.minimum, "max": self.maximum, "tiles": dict(self.tiles)}
