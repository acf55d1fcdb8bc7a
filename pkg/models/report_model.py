import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional

from utils.settings import TOOL_VERSION

# Reporting order; validation runs track the first four, test runs all nine
STATISTICS = ("mae", "rmse", "medae", "bias", "r2", "pearson_r", "rmae_percent", "iou", "f1")
VALIDATION_STATISTICS = ("mae", "rmse", "bias", "r2")
TEST_STATISTICS = STATISTICS


def _encode(value: float) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else value


def _decode(value) -> float:
    return float("nan") if value is None else float(value)


@dataclass
class EvalReport:
    """Evaluation statistics keyed by band, then statistic.

    Undefined statistics (e.g. IoU with an empty union) are NaN. ``spread``
    holds the across-tile sample standard deviations of an aggregated report.
    """
    bands: Dict[str, Dict[str, float]]
    n_valid: int
    threshold: float
    spread: Dict[str, Dict[str, float]] = field(default_factory=dict)
    tiles: List['EvalReport'] = field(default_factory=list)
    tile_id: Optional[str] = None

    def stat(self, band: str, name: str) -> float:
        return self.bands[band][name]

    def to_dict(self) -> Dict:
        data = {"threshold_m": self.threshold, "n_valid": self.n_valid}
        if self.tile_id is not None:
            data["tile_id"] = self.tile_id
        for band in sorted(self.bands):
            data[band] = {name: _encode(self.bands[band][name]) for name in STATISTICS}
        if self.spread:
            data["std"] = {
                band: {name: _encode(self.spread[band][name]) for name in STATISTICS}
                for band in sorted(self.spread)
            }
        if self.tiles:
            data["tiles"] = [tile.to_dict() for tile in self.tiles]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalReport':
        reserved = {"threshold_m", "n_valid", "tile_id", "std", "tiles"}
        bands = {
            band: {name: _decode(values.get(name)) for name in STATISTICS}
            for band, values in data.items() if band not in reserved
        }
        spread = {
            band: {name: _decode(values.get(name)) for name in STATISTICS}
            for band, values in data.get("std", {}).items()
        }
        return cls(
            bands=bands,
            n_valid=int(data["n_valid"]),
            threshold=float(data["threshold_m"]),
            spread=spread,
            tiles=[cls.from_dict(tile) for tile in data.get("tiles", [])],
            tile_id=data.get("tile_id"),
        )


@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs."""
    command: str
    parameters: Dict
    input_digests: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "parameters": self.parameters,
            "input_digests": self.input_digests,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunManifest':
        return cls(
            command=data["command"],
            parameters=data.get("parameters", {}),
            input_digests=data.get("input_digests", {}),
            tool_version=data.get("tool_version", TOOL_VERSION),
            timestamp=data.get("timestamp", datetime.now(timezone.utc).isoformat()),
            outputs=data.get("outputs", []),
        )
