"""Readers and writers for LiDAR point data.

LAS 1.2-1.4 is decoded with laspy. The signature, version and point format
byte are checked on the raw header first; LAZ point data is refused there.
"""

import io
import logging
from pathlib import Path
from typing import Dict, Optional, TextIO, Union

import laspy
import numpy as np
from laspy.errors import LaspyException
from laspy.vlrs.known import GeoKeyDirectoryVlr

from models.pointcloud_model import UNCLASSIFIED, PointCloud, bounds_of
from utils.errors import (
    EmptyCloudError,
    LasParseError,
    MissingInputError,
    TextParseError,
    TruncationError,
    UnsupportedFormatError,
)
from utils.settings import DEFAULT_CRS

logger = logging.getLogger(__name__)

LAS_SIGNATURE = b"LASF"
SUPPORTED_MINOR_VERSIONS = (2, 3, 4)
SUPPORTED_POINT_FORMATS = (0, 1, 6, 7)

# Byte offsets of the public header fields checked before decoding
VERSION_OFFSET = 24
FORMAT_OFFSET = 104
RECORD_LENGTH_OFFSET = 105
MIN_HEADER_SIZE = 227

PROJECTED_CS_KEY = 3072
GEOGRAPHIC_TYPE_KEY = 2048


def _check_preamble(blob: bytes) -> Dict:
    """Validate the raw header fields that decide whether the file can be decoded."""
    if len(blob) < 4 or blob[:4] != LAS_SIGNATURE:
        raise LasParseError("file_signature", 0, f"expected b'LASF', got {bytes(blob[:4])!r}")
    if len(blob) < MIN_HEADER_SIZE:
        raise LasParseError("header_size", 94, f"blob of {len(blob)} bytes is shorter than a LAS header")

    major, minor = blob[VERSION_OFFSET], blob[VERSION_OFFSET + 1]
    if major != 1 or minor not in SUPPORTED_MINOR_VERSIONS:
        raise UnsupportedFormatError(f"LAS version {major}.{minor} is not supported (1.2-1.4 only)")

    point_format = blob[FORMAT_OFFSET]
    # Bits 6-7 of the format byte mark LAZ-compressed point data
    if point_format & 0xC0:
        raise UnsupportedFormatError(
            "compressed LAZ point data is not supported; decompress the file externally "
            "(e.g. `laszip -i tile.laz -o tile.las`) and retry"
        )
    if point_format not in SUPPORTED_POINT_FORMATS:
        raise UnsupportedFormatError(
            f"point data record format {point_format} is not supported (0, 1, 6 and 7 only)"
        )
    if point_format >= 6 and minor < 4:
        raise UnsupportedFormatError(
            f"point data record format {point_format} requires LAS 1.4, file is 1.{minor}"
        )
    record_length = int.from_bytes(blob[RECORD_LENGTH_OFFSET:RECORD_LENGTH_OFFSET + 2], "little")
    return {"version": (major, minor), "point_format": point_format, "record_length": record_length}


def _crs_from_vlrs(header: laspy.LasHeader) -> Optional[int]:
    """EPSG code from the GeoKeyDirectory VLR, if the file carries one."""
    for vlr in header.vlrs:
        if not isinstance(vlr, GeoKeyDirectoryVlr):
            continue
        found = {key.id: key.value_offset for key in vlr.geo_keys if key.tiff_tag_location == 0}
        code = found.get(PROJECTED_CS_KEY) or found.get(GEOGRAPHIC_TYPE_KEY)
        if code:
            return int(code)
    return None


def parse_las(blob: bytes, default_crs: int = DEFAULT_CRS) -> PointCloud:
    """
    Decode a LAS 1.2-1.4 file held in memory.

    Args:
        blob: Complete file contents
        default_crs: EPSG code used when the file carries no GeoKey directory

    Returns:
        PointCloud with coordinates reconstructed from the header scale and offset
    """
    preamble = _check_preamble(blob)
    try:
        with laspy.open(io.BytesIO(blob)) as reader:
            header = reader.header
            count = int(header.point_count)
            expected = count * preamble["record_length"]
            available = len(blob) - int(header.offset_to_point_data)
            if available < expected:
                raise TruncationError("LAS point data block", expected, available)
            las = reader.read()
    except LaspyException as exc:
        raise LasParseError("header", 0, str(exc)) from exc
    except (ValueError, EOFError) as exc:
        raise LasParseError("point_data", 0, str(exc)) from exc

    crs_code = _crs_from_vlrs(header) or default_crs
    x = np.asarray(las.x, dtype=np.float64)
    y = np.asarray(las.y, dtype=np.float64)
    z = np.asarray(las.z, dtype=np.float64)
    classification = np.array(las.classification, dtype=np.int64)
    return_number = np.array(las.return_number, dtype=np.int64)

    zero_returns = int((return_number == 0).sum())
    if zero_returns:
        logger.debug("%d records carry return number 0; treating them as first returns", zero_returns)
        return_number[return_number == 0] = 1

    mins, maxs = header.mins, header.maxs
    bounds = (float(mins[0]), float(mins[1]), float(maxs[0]), float(maxs[1]))
    if count:
        sx, sy = float(header.scales[0]), float(header.scales[1])
        observed = bounds_of(x, y)
        slack_x = 0.5 * abs(sx) + 1e-9 * max(1.0, abs(bounds[0]), abs(bounds[2]))
        slack_y = 0.5 * abs(sy) + 1e-9 * max(1.0, abs(bounds[1]), abs(bounds[3]))
        if (observed[0] < bounds[0] - slack_x or observed[2] > bounds[2] + slack_x
                or observed[1] < bounds[1] - slack_y or observed[3] > bounds[3] + slack_y):
            raise LasParseError(
                "bounds", 179,
                f"header bounds {bounds} do not enclose the point extent {observed}",
            )
        # Header extremes are rounded; widen by the rounding slack so every point is enclosed
        bounds = (min(bounds[0], observed[0]), min(bounds[1], observed[1]),
                  max(bounds[2], observed[2]), max(bounds[3], observed[3]))

    logger.debug("Parsed LAS %d.%d format %d: %d points, EPSG:%d",
                 *preamble["version"], preamble["point_format"], count, crs_code)
    return PointCloud(x, y, z, classification, return_number, bounds, crs_code,
                      np.array(las.intensity, dtype=np.int64))

def parse_xyz_text(text: Union[str, TextIO], crs_code: int = DEFAULT_CRS) -> PointCloud:
    """
    Parse whitespace-separated "x y z [classification]" lines.

    Lines starting with '#' are comments; a missing classification means unclassified (1).
    """
    lines = text.splitlines() if isinstance(text, str) else text
    xs, ys, zs, classes = [], [], [], []
    for line_number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) not in (3, 4):
            raise TextParseError(line_number, f"expected 3 or 4 fields, got {len(tokens)}")
        try:
            x, y, z = (float(token) for token in tokens[:3])
        except ValueError as exc:
            raise TextParseError(line_number, f"non-numeric coordinate ({exc})") from exc
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            raise TextParseError(line_number, "coordinates must be finite")
        classification = UNCLASSIFIED
        if len(tokens) == 4:
            try:
                classification = int(tokens[3])
            except ValueError as exc:
                raise TextParseError(line_number, f"non-integer classification {tokens[3]!r}") from exc
        xs.append(x)
        ys.append(y)
        zs.append(z)
        classes.append(classification)

    if not xs:
        raise EmptyCloudError("XYZ text contains no data lines")
    return PointCloud.from_arrays(xs, ys, zs, classes, crs_code=crs_code)


def write_xyz_text(cloud: PointCloud, sink: Optional[TextIO] = None) -> str:
    """Serialise a cloud as XYZ text with 12 significant digits."""
    rows = [
        f"{x:.12g} {y:.12g} {z:.12g} {c}"
        for x, y, z, c in zip(cloud.x.tolist(), cloud.y.tolist(), cloud.z.tolist(),
                              cloud.classification.tolist())
    ]
    text = "\n".join(rows) + ("\n" if rows else "")
    if sink is not None:
        sink.write(text)
    return text


def read_point_cloud(path: Union[str, Path], default_crs: int = DEFAULT_CRS) -> PointCloud:
    """Read a LAS or XYZ text file, dispatching on the extension."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"point cloud not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".laz":
        raise UnsupportedFormatError(
            f"{path.name}: LAZ is not supported; decompress it externally to .las first"
        )
    if suffix == ".las":
        return parse_las(path.read_bytes(), default_crs)
    with open(path, "r", encoding="utf-8") as f:
        return parse_xyz_text(f.read(), default_crs)
