import hashlib
import io
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, TextIO, Tuple, Union

import numpy as np
import pandas as pd

from models.metrics_model import PadGrid, PadParams
from models.patch_model import PatchSet
from models.raster_model import GridSpec, MetricRaster
from models.report_model import STATISTICS, VALIDATION_STATISTICS, EvalReport, RunManifest
from models.window_model import WindowPlan
from utils.errors import (
    InvalidParameterError,
    MissingInputError,
    RasterParseError,
    TruncationError,
)
from utils.settings import DEFAULT_CRS, NODATA_ASCII

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ASCII_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")
BINARY_KEYS = ("width", "height", "origin_x", "origin_y", "cell_size", "crs", "band")
PATCH_MANIFEST_COLUMNS = ["tile_id", "row0", "col0", "valid_fraction"]
PLAN_COLUMNS = ["row0", "col0"]


@contextmanager
def _text_sink(sink: Union[PathLike, TextIO]) -> Iterator[TextIO]:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as f:
            yield f
    else:
        yield sink


def _read_text(source: Union[PathLike, TextIO]) -> str:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise MissingInputError(f"file not found: {path}")
        return path.read_text(encoding="utf-8")
    return source.read()


def file_digest(path: PathLike) -> str:
    """64-bit BLAKE2b content hash as hex."""
    digest = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# --- ESRI ASCII grid ---------------------------------------------------------

def write_ascii_grid(raster: MetricRaster, sink: Union[PathLike, TextIO]) -> None:
    """Write an ESRI ASCII grid, values row-major top to bottom with 12 significant digits."""
    grid = raster.grid
    min_x, min_y, _, _ = grid.bounds
    values = np.where(raster.nodata_mask, NODATA_ASCII, raster.values)
    with _text_sink(sink) as f:
        f.write(f"ncols {grid.width}\n")
        f.write(f"nrows {grid.height}\n")
        f.write(f"xllcorner {min_x!r}\n")
        f.write(f"yllcorner {min_y!r}\n")
        f.write(f"cellsize {grid.cell_size!r}\n")
        f.write(f"NODATA_value {NODATA_ASCII}\n")
        np.savetxt(f, values, fmt="%.12g", delimiter=" ", newline="\n")


def read_ascii_grid(source: Union[PathLike, TextIO], band_name: Optional[str] = None,
                    crs_code: int = DEFAULT_CRS) -> MetricRaster:
    """
    Read an ESRI ASCII grid.

    Args:
        source: Path or text stream
        band_name: Band label; defaults to the file stem for paths
        crs_code: EPSG code (the format does not carry one)

    Returns:
        MetricRaster with NODATA_value cells masked
    """
    text = _read_text(source)
    if band_name is None:
        band_name = Path(source).stem if isinstance(source, (str, Path)) else "chm"

    header: Dict[str, str] = {}
    lines = text.splitlines()
    body_start = 0
    for index, line in enumerate(lines):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) == 2 and tokens[0][0].isalpha():
            header[tokens[0].lower()] = tokens[1]
            body_start = index + 1
        else:
            break

    # Centre-registered headers are converted to corners
    for axis in ("x", "y"):
        centre = header.pop(f"{axis}llcenter", None)
        if centre is not None and f"{axis}llcorner" not in header and "cellsize" in header:
            header[f"{axis}llcorner"] = str(float(centre) - 0.5 * float(header["cellsize"]))
    for key in ASCII_KEYS:
        if key not in header:
            raise RasterParseError(key)

    try:
        width = int(header["ncols"])
        height = int(header["nrows"])
        min_x = float(header["xllcorner"])
        min_y = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header.get("nodata_value", NODATA_ASCII))
        values = np.array(" ".join(lines[body_start:]).split(), dtype=np.float64)
    except ValueError as exc:
        raise RasterParseError("values", f"unparseable ASCII grid ({exc})") from exc
    if values.size != width * height:
        raise RasterParseError("values", f"expected {width * height} cells, found {values.size}")

    values = values.reshape(height, width)
    nodata_mask = (values == nodata) | ~np.isfinite(values)
    grid = GridSpec(min_x, min_y + height * cell, cell, width, height, crs_code)
    return MetricRaster(grid, values, nodata_mask, band_name)


# --- Binary float64 raster -------------------------------------------------------

def _binary_paths(base: PathLike) -> Tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".f64", ".hdr"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".f64"), base.with_name(base.name + ".hdr")


def _write_header(path: Path, entries: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in entries.items():
            f.write(f"{key}:{value!r}\n" if isinstance(value, float) else f"{key}:{value}\n")


def _read_header(path: Path) -> Dict[str, str]:
    if not path.exists():
        raise MissingInputError(f"raster header not found: {path}")
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            entries[key.strip()] = value.strip()
    for key in BINARY_KEYS:
        if key not in entries:
            raise RasterParseError(key)
    return entries


def _grid_from_header(entries: Dict[str, str]) -> GridSpec:
    try:
        return GridSpec(
            origin_x=float(entries["origin_x"]),
            origin_y=float(entries["origin_y"]),
            cell_size=float(entries["cell_size"]),
            width=int(entries["width"]),
            height=int(entries["height"]),
            crs_code=int(entries["crs"]),
        )
    except ValueError as exc:
        raise RasterParseError("grid", f"invalid header value ({exc})") from exc


def _read_payload(path: Path, n_values: int) -> np.ndarray:
    if not path.exists():
        raise MissingInputError(f"raster payload not found: {path}")
    payload = path.read_bytes()
    expected = n_values * 8
    if len(payload) != expected:
        raise TruncationError(f"raster payload {path.name}", expected, len(payload))
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def write_binary(raster: MetricRaster, sink: PathLike) -> Tuple[Path, Path]:
    """
    Write ``<name>.f64`` (little-endian float64, row-major) plus a ``<name>.hdr`` sidecar.

    Nodata is stored as NaN; metadata entries become extra header lines.
    """
    payload_path, header_path = _binary_paths(sink)
    entries = {**raster.grid.to_dict(), "band": raster.band_name, "nodata": "nan"}
    entries.update({key: value for key, value in raster.metadata.items() if key not in entries})
    _write_header(header_path, entries)
    payload_path.write_bytes(np.ascontiguousarray(raster.values, dtype="<f8").tobytes())
    return payload_path, header_path


def read_binary(source: PathLike) -> MetricRaster:
    payload_path, header_path = _binary_paths(source)
    entries = _read_header(header_path)
    grid = _grid_from_header(entries)
    values = _read_payload(payload_path, grid.width * grid.height).reshape(grid.shape)
    reserved = set(BINARY_KEYS) | {"nodata", "layers"}
    metadata = {key: value for key, value in entries.items() if key not in reserved}
    return MetricRaster(grid, values, np.isnan(values), entries["band"], metadata)


def write_layered(layers: np.ndarray, grid: GridSpec, band: str, sink: PathLike,
                  metadata: Optional[Dict[str, object]] = None) -> Tuple[Path, Path]:
    """Write an (L, height, width) stack with the binary raster conventions, layer-major."""
    n_layers = layers.shape[0]
    payload_path, header_path = _binary_paths(sink)
    entries = {**grid.to_dict(), "band": band, "nodata": "nan", "layers": n_layers}
    entries.update(metadata or {})
    _write_header(header_path, entries)
    payload_path.write_bytes(np.ascontiguousarray(layers, dtype="<f8").tobytes())
    return payload_path, header_path


def read_layered(source: PathLike) -> Tuple[np.ndarray, GridSpec, Dict[str, str]]:
    payload_path, header_path = _binary_paths(source)
    entries = _read_header(header_path)
    if "layers" not in entries:
        raise RasterParseError("layers")
    grid = _grid_from_header(entries)
    n_layers = int(entries["layers"])
    values = _read_payload(payload_path, n_layers * grid.width * grid.height)
    return values.reshape(n_layers, grid.height, grid.width), grid, entries


def write_pad_grid(pad: PadGrid, sink: PathLike) -> Tuple[Path, Path]:
    """Persist a PAD grid; cells without returns are NaN in every layer."""
    layers = np.moveaxis(pad.pad, -1, 0).copy()
    layers[:, ~pad.valid] = np.nan
    return write_layered(layers, pad.grid, "pad", sink, pad.params.to_dict())


def read_pad_grid(source: PathLike) -> PadGrid:
    """Load a PAD grid written by write_pad_grid. Saturation flags and return counts are not persisted."""
    layers, grid, entries = read_layered(source)
    params = PadParams.from_dict(entries)
    valid = np.isfinite(layers[0])
    pad = np.moveaxis(np.where(np.isfinite(layers), layers, 0.0), 0, -1)
    return PadGrid(
        grid=grid,
        pad=pad,
        saturated_mask=np.zeros(pad.shape, dtype=bool),
        params=params,
        total_per_cell=valid.astype(np.int64),
    )


def read_raster(path: PathLike, crs_code: int = DEFAULT_CRS) -> MetricRaster:
    """Read a raster in either format, dispatching on the extension."""
    path = Path(path)
    if path.suffix.lower() in (".asc", ".txt"):
        return read_ascii_grid(path, crs_code=crs_code)
    return read_binary(path)


# --- Patches -------------------------------------------------------------------

def write_patch_set(patch_set: PatchSet, out_dir: PathLike) -> Path:
    """
    Write every patch channel as ``<tile>_<row0>_<col0>_<band>.f64`` and a CSV manifest.

    The validity mask is stored as band ``valid`` (1/0) and the PAD profile, when
    present, as a layered raster ``<tile>_<row0>_<col0>_pad``.

    Returns:
        Path of the manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = patch_set.source_grid
    for patch in patch_set:
        window = grid.window(patch.row0, patch.col0, patch.size, patch.size)
        for band, values in patch.channels.items():
            write_binary(MetricRaster.from_values(window, values, band), out_dir / f"{patch.name}_{band}")
        write_binary(MetricRaster.from_values(window, patch.valid.astype(np.float64), "valid"),
                     out_dir / f"{patch.name}_valid")
        if patch.pad_profile is not None:
            size = patch.pad_profile.shape[-1]
            profile_grid = GridSpec(window.origin_x, window.origin_y,
                                    window.cell_size * patch.pad_factor, size, size, window.crs_code)
            write_layered(patch.pad_profile, profile_grid, "pad", out_dir / f"{patch.name}_pad",
                          {"pad_factor": patch.pad_factor})

    manifest_path = out_dir / "patches.csv"
    frame = pd.DataFrame([patch.to_dict() for patch in patch_set], columns=PATCH_MANIFEST_COLUMNS)
    frame.to_csv(manifest_path, index=False, lineterminator="\n")
    logger.info("Wrote %d patches to %s", len(patch_set), out_dir)
    return manifest_path


def read_patch_manifest(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"patch manifest not found: {path}")
    return pd.read_csv(path, dtype={"tile_id": str})


# --- Window plans ---------------------------------------------------------------

def write_plan_csv(plan: WindowPlan, sink: Union[PathLike, TextIO]) -> None:
    frame = pd.DataFrame(plan.windows, columns=PLAN_COLUMNS)
    with _text_sink(sink) as f:
        frame.to_csv(f, index=False, lineterminator="\n")


def read_plan_csv(source: Union[PathLike, TextIO], window_size: int, overlap: int) -> WindowPlan:
    """Read a ``row0,col0`` plan; tile dimensions follow from the furthest window."""
    text = _read_text(source)
    frame = pd.read_csv(io.StringIO(text))
    missing = [column for column in PLAN_COLUMNS if column not in frame.columns]
    if missing:
        raise RasterParseError(missing[0], "plan CSV is missing column")
    windows = [(int(r), int(c)) for r, c in zip(frame["row0"], frame["col0"])]
    if not windows:
        raise InvalidParameterError("plan", "window plan is empty")
    tile_dims = (max(r for r, _ in windows) + window_size, max(c for _, c in windows) + window_size)
    return WindowPlan(windows, window_size, overlap, tile_dims)


# --- Reports and manifests --------------------------------------------------------

def _suite_statistics(suite: str) -> Tuple[str, ...]:
    if suite == "validation":
        return VALIDATION_STATISTICS
    if suite == "test":
        return STATISTICS
    raise InvalidParameterError("suite", f"expected 'validation' or 'test', got {suite!r}")


def write_report(report: EvalReport, fmt: str, sink: Union[PathLike, TextIO], suite: str = "test") -> None:
    """
    Write an evaluation report as JSON (band -> statistic -> number) or CSV (band,metric,value).

    Undefined statistics are ``null`` in JSON and empty in CSV.
    """
    statistics = _suite_statistics(suite)
    if fmt == "json":
        data = report.to_dict()
        for band in report.bands:
            data[band] = {name: data[band][name] for name in statistics}
        with _text_sink(sink) as f:
            json.dump(data, f, indent=2)
            f.write("\n")
    elif fmt == "csv":
        rows = [
            {"band": band, "metric": name, "value": report.bands[band][name]}
            for band in sorted(report.bands) for name in statistics
        ]
        frame = pd.DataFrame(rows, columns=["band", "metric", "value"])
        with _text_sink(sink) as f:
            frame.to_csv(f, index=False, lineterminator="\n")
    else:
        raise InvalidParameterError("format", f"expected 'json' or 'csv', got {fmt!r}")


def read_report(source: Union[PathLike, TextIO]) -> EvalReport:
    return EvalReport.from_dict(json.loads(_read_text(source)))


def write_manifest(manifest: RunManifest, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class FileHandler:
    """Writes a command's outputs into one directory and remembers what it wrote."""

    def __init__(self, output_dir: PathLike):
        """
        Initialize the file handler.

        Args:
            output_dir: Directory receiving all outputs; created if missing
        """
        self.output_dir = Path(output_dir)
        os.makedirs(self.output_dir, exist_ok=True)
        self.written: List[Path] = []

    def _track(self, *paths: Path) -> None:
        self.written.extend(paths)

    def save_raster(self, raster: MetricRaster, name: Optional[str] = None,
                    ascii_grid: bool = True) -> List[Path]:
        """
        Save a raster in binary form and, optionally, as an ASCII grid.

        Args:
            raster: Raster to save
            name: File stem; defaults to the band name
            ascii_grid: Also write ``<name>.asc``

        Returns:
            Paths written
        """
        stem = self.output_dir / (name or raster.band_name)
        paths = list(write_binary(raster, stem))
        if ascii_grid:
            ascii_path = stem.with_name(stem.name + ".asc")
            write_ascii_grid(raster, ascii_path)
            paths.append(ascii_path)
        self._track(*paths)
        return paths

    def save_pad_grid(self, pad: PadGrid, name: str = "pad") -> List[Path]:
        paths = list(write_pad_grid(pad, self.output_dir / name))
        self._track(*paths)
        return paths

    def save_patch_set(self, patch_set: PatchSet) -> Path:
        manifest = write_patch_set(patch_set, self.output_dir)
        self._track(manifest)
        return manifest

    def save_report(self, report: EvalReport, fmt: str, name: str = "report",
                    suite: str = "test") -> Path:
        path = self.output_dir / f"{name}.{fmt}"
        write_report(report, fmt, path, suite)
        self._track(path)
        return path

    def save_plan(self, plan: WindowPlan, name: str = "plan.csv") -> Path:
        path = self.output_dir / name
        write_plan_csv(plan, path)
        self._track(path)
        return path

    def save_manifest(self, manifest: RunManifest, name: str = "manifest.json") -> Path:
        manifest.outputs = sorted(
            str(path.relative_to(self.output_dir)) for path in self.written
            if path.is_relative_to(self.output_dir)
        )
        return write_manifest(manifest, self.output_dir / name)
