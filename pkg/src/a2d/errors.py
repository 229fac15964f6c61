"""Exception hierarchy shared by the library and the CLI."""


class A2DError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(A2DError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InputError(A2DError, ValueError):
    """Bad user-supplied data (token ids, corpora, empty sets)."""


class ConfigError(A2DError, ValueError):
    """Inconsistent or invalid configuration."""


class FormatError(A2DError, ValueError):
    """A file on disk does not follow the expected binary/text layout."""
