"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class WindcorrError(Exception):
    """Base class for all package errors."""


class ConfigError(WindcorrError):
    """Invalid or unresolvable configuration."""


class DataError(WindcorrError):
    """Malformed, missing, or inconsistent input data."""


class CheckpointError(DataError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


class NoObservationsError(DataError):
    """A sample carries zero valid observation tokens."""


class NoValidKeysError(DataError):
    """An attending query row has no valid key to attend to."""


class NumericalError(WindcorrError):
    """Non-finite values or other numerical failure mid-computation."""
