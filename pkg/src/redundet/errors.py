"""Exception types shared across the package."""


class RedundetError(Exception):
    """Base class for all package errors."""


class DataError(RedundetError, ValueError):
    """Invalid or inconsistent input data (exit status 2 from the CLI)."""


class DatasetError(DataError):
    """Missing, corrupted or incompatible dataset / artifact on disk."""


class PlacementError(DataError):
    """Scene generator could not place the requested objects."""


class DegenerateDepthError(DataError):
    """Depth map has no usable range (all invalid or constant)."""


class ShapeMismatchError(DataError):
    """Arrays that must share a shape do not."""


class UndefinedScoreError(DataError):
    """A score is undefined for the given inputs (e.g. no output detections)."""


class NumericalError(RedundetError, ArithmeticError):
    """Non-finite values during training or evaluation (exit status 3)."""
