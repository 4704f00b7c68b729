"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class BoxsegError(Exception):
    pass


class ShapeError(BoxsegError):
    """Tensor shapes or axes incompatible with the requested operation."""


class ConfigError(BoxsegError):
    """Bad config file, unknown key, or unparseable value."""


class DataError(BoxsegError):
    """Missing or malformed dataset file, annotation, or checkpoint."""


class NumericError(BoxsegError):
    """Non-finite loss or other numeric failure during training."""
