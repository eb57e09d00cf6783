"""Exception hierarchy.

The CLI maps ``DataError`` subclasses to exit code 2 and ``SolverError`` to 3.
"""


class SegflowError(Exception):
    """Base class for all package errors."""


class DataError(SegflowError, ValueError):
    """Invalid input data (geometry preconditions, files, rasters)."""


class BehindCameraError(DataError):
    pass


class InvalidDepthError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class InvalidWindowError(DataError):
    pass


class FormatError(DataError):
    """Malformed flow / intrinsics file."""


class PairingError(DataError):
    """Color frame without its depth counterpart (or vice versa)."""


class SceneError(DataError):
    """Synthetic scene specification that cannot be rendered as requested."""


class UndefinedMeanError(DataError):
    """EPE requested over an empty set of jointly valid pixels."""


class ConfigError(SegflowError, ValueError):
    """Unknown or malformed configuration key."""


class SolverError(SegflowError, RuntimeError):
    pass


class NonFiniteResidualError(SolverError):
    def __init__(self, term: str, index: int, value: float):
        self.term = term
        self.index = index
        self.value = value
        super().__init__(f"non-finite residual in term '{term}' at index {index}: {value!r}")
