"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data problems
(files, formats, shapes) -> 2, numeric failures (empty masks, non-finite
values) -> 3.
"""


class SurgiDepthError(Exception):
    """Base class for all package-specific errors."""


class UsageError(SurgiDepthError):
    """Bad command, flag, or argument combination."""


class DataError(SurgiDepthError):
    """A file or dataset could not be read, written, or reconciled."""


class MissingFileError(DataError):
    """A referenced file does not exist."""


class MalformedFileError(DataError):
    """A file exists but does not parse as the expected format."""


class ShapeMismatchError(DataError):
    """Two arrays that must share a shape do not."""


class CheckpointError(DataError):
    """A model checkpoint is corrupt, truncated, or inconsistent."""


class NumericError(SurgiDepthError):
    """A numeric precondition failed (empty mask, non-positive median, ...)."""
