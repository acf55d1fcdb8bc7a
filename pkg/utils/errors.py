"""Exception hierarchy for CanopyForge.

Every error carries the process exit code the CLI maps it to.
"""


class CanopyForgeError(Exception):
    """Base class for all CanopyForge errors."""

    exit_code = 1


class InputError(CanopyForgeError):
    """The input data could not be read or decoded."""

    exit_code = 2


class PreconditionError(CanopyForgeError):
    """A numeric precondition or parameter constraint was violated."""

    exit_code = 3


class LasParseError(InputError):
    """Malformed LAS header or VLR."""

    def __init__(self, field: str, offset: int, detail: str):
        self.field = field
        self.offset = offset
        super().__init__(f"LAS field '{field}' at byte offset {offset}: {detail}")


class UnsupportedFormatError(InputError):
    pass


class TruncationError(InputError):
    """A binary payload is shorter (or longer) than its header declares."""

    def __init__(self, what: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected} bytes, got {actual}")


class TextParseError(InputError):
    def __init__(self, line_number: int, detail: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {detail}")


class EmptyCloudError(InputError):
    pass


class RasterParseError(InputError):
    def __init__(self, key: str, detail: str = "missing header key"):
        self.key = key
        super().__init__(f"{detail}: {key}")


class MissingInputError(InputError):
    pass


class InvalidParameterError(PreconditionError):
    def __init__(self, name: str, detail: str):
        self.name = name
        super().__init__(f"invalid {name}: {detail}")


class CoverageError(PreconditionError):
    pass


class AlignmentError(PreconditionError):
    def __init__(self, residual_x: float, residual_y: float):
        self.residual = (residual_x, residual_y)
        super().__init__(
            f"grids are not alignment-compatible: residual offset "
            f"({residual_x:.6g}, {residual_y:.6g}) cells"
        )


class CrsMismatchError(PreconditionError):
    def __init__(self, src_crs: int, ref_crs: int):
        super().__init__(f"CRS mismatch: EPSG:{src_crs} vs EPSG:{ref_crs}")


class ResampleError(PreconditionError):
    pass


class GridMismatchError(PreconditionError):
    pass


class NoValidPixelsError(PreconditionError):
    pass


class DimensionError(PreconditionError):
    pass


class ReportError(PreconditionError):
    pass
