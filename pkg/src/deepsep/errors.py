"""Exception hierarchy shared across the package.

Data/format problems and numerical failures are kept on separate branches
so the CLI can map them to distinct exit codes (2 and 3 respectively).
"""


class DeepsepError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(DeepsepError):
    """A file or record does not conform to its declared format."""


class FileFormatError(DataFormatError):
    """Bad magic bytes or a malformed header/record."""


class TruncatedFileError(DataFormatError):
    """The file ended in the middle of a record."""


class IncompleteModelError(DataFormatError):
    """A weight file is self-consistent but lacks required tensor records."""


class ShapeMismatchError(DataFormatError):
    """A stored tensor's shape conflicts with the declared architecture."""


class NumericalError(DeepsepError):
    """A numerical failure (NaN loss, filter divergence, failed tolerance)."""


class LmsDivergenceError(NumericalError):
    """The adaptive filter diverged; try a smaller step size."""
