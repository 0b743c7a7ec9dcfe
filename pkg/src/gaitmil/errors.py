"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure a user can
trigger from the command line should be raised as one of the classes below
rather than a bare ValueError.
"""


class GaitMilError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(GaitMilError, ValueError):
    """A function was called with arguments that violate its contract."""


class SchemaError(GaitMilError):
    """Persisted data (manifest, config, checkpoint) does not match the expected schema."""


class DatasetError(GaitMilError):
    """A dataset on disk is missing or unreadable."""


class ConfigurationError(GaitMilError):
    """A configuration is internally consistent but unusable for the requested run."""


class NumericError(GaitMilError):
    """A non-finite value appeared where the math requires finite numbers."""
