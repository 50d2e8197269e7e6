"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class PathsurvError(Exception):
    """Base class for all package errors."""


class ConfigError(PathsurvError):
    """Malformed or inconsistent configuration."""


class DataError(PathsurvError):
    """Malformed input data (omics files, catalogues, schemas)."""


class NumericError(PathsurvError):
    """Numerical failure: non-finite values, singular systems, divergence."""


class NoEventsError(NumericError):
    """A batch or cohort contains no observed events; the Cox partial
    likelihood is undefined and the caller should resample."""
