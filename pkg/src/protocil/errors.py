"""Error hierarchy shared by all protocil modules.

The CLI maps these onto distinct process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ProtocilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ProtocilError):
    """Invalid parameter value, flag combination, or operation precondition."""


class DataError(ProtocilError):
    """Malformed or internally inconsistent data file / dataset."""


class NumericError(ProtocilError):
    """A numerical routine failed to converge or produced non-finite values."""
