import os
from dataclasses import dataclass, field
from typing import Optional

TOOL_NAME = "CanopyForge"
TOOL_VERSION = "1.0.0"

# ETRS89 / UTM 33N
DEFAULT_CRS = 25833

DEFAULT_CELL_SIZE = 1.0
DEFAULT_TARGET_CELL = 0.2
DEFAULT_PERCENTILES = (0.05, 0.50, 0.95)
DEFAULT_PATCH_SIZE = 224
DEFAULT_MIN_VALID_FRACTION = 0.5
DEFAULT_PAD_FACTOR = 4
DEFAULT_CANOPY_HEIGHT = 2.0
DEFAULT_OVERLAP = 32
DEFAULT_THRESHOLD = 2.0
DEFAULT_EPS = 1e-6
DEFAULT_SEED = 42
GRADIENT_TOLERANCE = 1e-4

NODATA_ASCII = -9999

THREADS_ENV = "CANOPYFORGE_THREADS"
LOG_LEVEL_ENV = "CANOPYFORGE_LOG_LEVEL"


def default_threads() -> int:
    """Thread count from the environment, falling back to available cores."""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            pass
    return os.cpu_count() or 1


def default_log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "INFO").upper()


@dataclass
class Settings:
    """Run-wide settings shared by all subcommands."""
    threads: int = field(default_factory=default_threads)
    seed: int = DEFAULT_SEED
    log_level: str = field(default_factory=default_log_level)

    @classmethod
    def resolve(cls, threads: Optional[int] = None, seed: Optional[int] = None,
                log_level: Optional[str] = None) -> 'Settings':
        """Build settings from CLI values, using env/defaults for the ones left unset."""
        settings = cls()
        if threads is not None:
            settings.threads = max(1, int(threads))
        if seed is not None:
            settings.seed = int(seed)
        if log_level:
            settings.log_level = log_level.upper()
        return settings

    def to_dict(self) -> dict:
        return {"threads": self.threads, "seed": self.seed, "log_level": self.log_level}
