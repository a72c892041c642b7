"""Exception hierarchy shared by every module."""


class TetralocError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(TetralocError, ValueError):
    pass


class DegenerateGeometryError(TetralocError):
    """Antenna layout or sub-matrix cannot determine a 3D direction."""


class DegeneratePoseError(TetralocError):
    pass


class InsufficientGeometryError(TetralocError):
    """Fewer than three antenna-pair rows survived rejection."""


class AmbiguousBearingError(TetralocError):
    pass


class NoFirstPathError(TetralocError):
    pass


class RangingError(TetralocError):
    pass


class CalibrationError(TetralocError):
    pass


class CrcError(TetralocError):
    pass


class MissingFrameError(TetralocError):
    pass


class MessageTooLongError(TetralocError):
    pass


class InsufficientDataError(TetralocError):
    pass


class InvalidSeriesError(TetralocError, ValueError):
    pass


class ConfigError(TetralocError):
    """Configuration problem; ``line`` is the 1-based source line when known."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
