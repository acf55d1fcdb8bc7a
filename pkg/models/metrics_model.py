from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from models.raster_model import GridSpec, near_integer
from utils.errors import InvalidParameterError


@dataclass(frozen=True)
class PadParams:
    """Beer-Lambert profile parameters.

    k is the extinction coefficient (spherical leaf angles give 0.5), dz the layer
    thickness and max_height the top of the profile, all in meters.
    """
    k: float = 0.5
    dz: float = 1.0
    max_height: float = 60.0

    def __post_init__(self):
        if not self.k > 0:
            raise InvalidParameterError("k", f"extinction coefficient must be > 0, got {self.k}")
        if not self.dz > 0:
            raise InvalidParameterError("dz", f"layer thickness must be > 0, got {self.dz}")
        if not self.max_height > 0 or near_integer(self.max_height / self.dz) is None:
            raise InvalidParameterError(
                "max_height", f"must be a positive multiple of dz={self.dz}, got {self.max_height}"
            )

    @property
    def n_layers(self) -> int:
        return near_integer(self.max_height / self.dz)

    def to_dict(self) -> Dict:
        return {"k": self.k, "dz": self.dz, "max_height": self.max_height}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PadParams':
        return cls(k=float(data["k"]), dz=float(data["dz"]), max_height=float(data["max_height"]))


@dataclass
class ReturnHistogramGrid:
    """Return counts per (row, col, layer); layer i covers [i*dz, (i+1)*dz)."""
    grid: GridSpec
    counts: np.ndarray
    total_per_cell: np.ndarray

    @property
    def n_layers(self) -> int:
        return int(self.counts.shape[-1])


@dataclass
class PadGrid:
    """Plant Area Density per (row, col, layer) in m²/m³.

    ``return_counts`` keeps the histogram the profile came from so FHD can be
    computed over return proportions as well.
    """
    grid: GridSpec
    pad: np.ndarray
    saturated_mask: np.ndarray
    params: PadParams
    total_per_cell: np.ndarray
    return_counts: Optional[np.ndarray] = None

    @property
    def valid(self) -> np.ndarray:
        """Cells that received at least one return."""
        return self.total_per_cell > 0

    @property
    def n_layers(self) -> int:
        return int(self.pad.shape[-1])
