from dataclasses import dataclass
from typing import Dict, List, Tuple


@dataclass
class WindowPlan:
    """Sliding-window offsets covering a tile, listed row-major."""
    windows: List[Tuple[int, int]]
    window_size: int
    overlap: int
    tile_dims: Tuple[int, int]

    @property
    def stride(self) -> int:
        return self.window_size - self.overlap

    def __len__(self) -> int:
        return len(self.windows)

    def to_dict(self) -> Dict:
        return {
            "windows": [list(w) for w in self.windows],
            "window_size": self.window_size,
            "overlap": self.overlap,
            "tile_dims": list(self.tile_dims),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'WindowPlan':
        return cls(
            windows=[tuple(w) for w in data["windows"]],
            window_size=int(data["window_size"]),
            overlap=int(data["overlap"]),
            tile_dims=tuple(data["tile_dims"]),
        )
