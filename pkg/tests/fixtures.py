"""Byte-level LAS builder and small synthetic data sets for the tests."""

import struct
from typing import Optional, Sequence, Tuple

import numpy as np

from models.raster_model import GridSpec, MetricRaster

HEADER_FORMAT = "<4sHH16sBB32s32sHHHIIBHI5I3d3d6d"
VLR_FORMAT = "<H16sHH32s"
RECORD_FORMATS = {
    0: "<iiiHBBbBH",
    1: "<iiiHBBbBHd",
    6: "<iiiHBBBBhHd",
    7: "<iiiHBBBBhHdHHH",
}


def geokey_vlr(epsg: int) -> bytes:
    """GeoKeyDirectory VLR holding a single ProjectedCSTypeGeoKey."""
    body = struct.pack("<8H", 1, 1, 0, 1, 3072, 0, 1, epsg)
    header = struct.pack(VLR_FORMAT, 0, b"LASF_Projection", 34735, len(body), b"geokeys")
    return header + body


def build_las(x: Sequence[float], y: Sequence[float], z: Sequence[float],
              classification: Optional[Sequence[int]] = None,
              return_number: Optional[Sequence[int]] = None,
              minor: int = 2, point_format: int = 0,
              scale: Tuple[float, float, float] = (0.01, 0.01, 0.01),
              offset: Tuple[float, float, float] = (0.0, 0.0, 0.0),
              epsg: Optional[int] = None, extra_bytes: int = 0,
              bounds: Optional[Tuple[float, float, float, float]] = None,
              legacy_count: Optional[int] = None,
              format_byte: Optional[int] = None) -> bytes:
    """
    Assemble a LAS file in memory.

    Coordinates are quantised as round((v - offset) / scale). Header bounds
    default to the extent of the quantised coordinates.
    """
    n = len(x)
    classification = [1] * n if classification is None else list(classification)
    return_number = [1] * n if return_number is None else list(return_number)
    raw = [np.round((np.asarray(v, dtype=np.float64) - o) / s).astype(np.int64)
           for v, s, o in zip((x, y, z), scale, offset)]
    decoded = [r * s + o for r, s, o in zip(raw, scale, offset)]

    record_size = struct.calcsize(RECORD_FORMATS[point_format]) + extra_bytes
    records = bytearray()
    for i in range(n):
        X, Y, Z = int(raw[0][i]), int(raw[1][i]), int(raw[2][i])
        if point_format in (0, 1):
            values = [X, Y, Z, 100, return_number[i] | (1 << 3), classification[i], 0, 0, 1]
        else:
            values = [X, Y, Z, 100, return_number[i] | (1 << 4), 0, classification[i], 0, 0, 1]
        if point_format in (1, 6, 7):
            values.append(0.0)
        if point_format == 7:
            values.extend([0, 0, 0])
        records += struct.pack(RECORD_FORMATS[point_format], *values) + b"\0" * extra_bytes

    header_size = {2: 227, 3: 235, 4: 375}[minor]
    vlrs = geokey_vlr(epsg) if epsg is not None else b""
    offset_to_points = header_size + len(vlrs)
    if bounds is None and n:
        bounds = (decoded[0].min(), decoded[1].min(), decoded[0].max(), decoded[1].max())
    elif bounds is None:
        bounds = (0.0, 0.0, 0.0, 0.0)
    min_z = float(decoded[2].min()) if n else 0.0
    max_z = float(decoded[2].max()) if n else 0.0
    count = n if legacy_count is None else legacy_count

    header = struct.pack(
        HEADER_FORMAT,
        b"LASF", 0, 0, b"\0" * 16, 1, minor, b"fixture", b"tests",
        1, 2024, header_size, offset_to_points, 1 if epsg is not None else 0,
        point_format if format_byte is None else format_byte, record_size, count,
        count, 0, 0, 0, 0,
        *scale, *offset,
        bounds[2], bounds[0], bounds[3], bounds[1], max_z, min_z,
    )
    if minor >= 3:
        header += struct.pack("<Q", 0)
    if minor == 4:
        header += struct.pack("<QIQ15Q", 0, 0, n, n, *([0] * 14))
    assert len(header) == header_size
    return header + vlrs + bytes(records)


def forest_cloud(rng: np.random.Generator, size: int = 20, n_canopy: int = 2000,
                 ground_z: float = 100.0, max_height: float = 30.0):
    """Flat ground returns on every integer grid node plus random canopy returns above it."""
    gx, gy = np.meshgrid(np.arange(size + 1, dtype=float), np.arange(size + 1, dtype=float))
    cx = rng.uniform(0.01, size - 0.01, n_canopy).round(2)
    cy = rng.uniform(0.01, size - 0.01, n_canopy).round(2)
    cz = (ground_z + rng.uniform(0.0, max_height, n_canopy)).round(2)
    x = np.concatenate([gx.ravel(), cx])
    y = np.concatenate([gy.ravel(), cy])
    z = np.concatenate([np.full(gx.size, ground_z), cz])
    classification = np.concatenate([np.full(gx.size, 2), np.full(n_canopy, 5)])
    return x, y, z, classification


def make_raster(values, cell: float = 1.0, origin_x: float = 0.0, origin_y: Optional[float] = None,
                band: str = "chm", crs: int = 25833) -> MetricRaster:
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape
    if origin_y is None:
        origin_y = height * cell
    grid = GridSpec(origin_x, origin_y, cell, width, height, crs)
    return MetricRaster.from_values(grid, values, band)
