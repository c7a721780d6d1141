"""Exception types raised across the package."""

from __future__ import annotations


class LaneGeomError(ValueError):
    """Base class for all package errors."""


class InvalidDimensionError(LaneGeomError):
    pass


class LengthMismatchError(LaneGeomError):
    pass


class EmptyLaneError(LaneGeomError):
    pass


class NoValidRowsError(LaneGeomError):
    pass


class DegenerateWidthError(LaneGeomError):
    pass


class NonFiniteError(LaneGeomError):
    pass


class ShapeMismatchError(LaneGeomError):
    pass


class OutOfRangeError(LaneGeomError):
    pass


class ConstantSeriesError(LaneGeomError):
    pass


class MissingCacheError(LaneGeomError):
    pass


class DegeneratePolylineError(LaneGeomError):
    pass


class EmptyMaskError(LaneGeomError):
    pass


class ResolutionMismatchError(LaneGeomError):
    pass


class ConfigError(LaneGeomError):
    """Config schema violation; ``path`` names the offending key."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ParseError(LaneGeomError):
    """Malformed lane text; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = ""):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if source and line else (f"line {line}" if line else source)
        super().__init__(f"{where}: {message}" if where else message)
