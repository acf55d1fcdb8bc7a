from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from models.raster_model import GridSpec


@dataclass
class Patch:
    """A square training window cut from a tile."""
    tile_id: str
    row0: int
    col0: int
    channels: Dict[str, np.ndarray]
    valid: np.ndarray
    pad_profile: Optional[np.ndarray] = None
    pad_factor: Optional[int] = None

    @property
    def size(self) -> int:
        return int(self.valid.shape[0])

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    @property
    def name(self) -> str:
        return f"{self.tile_id}_{self.row0}_{self.col0}"

    def to_dict(self) -> Dict:
        """Manifest row for this patch."""
        return {
            "tile_id": self.tile_id,
            "row0": self.row0,
            "col0": self.col0,
            "valid_fraction": self.valid_fraction,
        }


@dataclass
class PatchSet:
    patches: List[Patch]
    source_grid: GridSpec
    stride: int
    min_valid_fraction: float = 0.0
    patch_size: int = 224
    metadata: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)
