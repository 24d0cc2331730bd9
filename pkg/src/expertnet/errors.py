"""Exception taxonomy shared by every expertnet module.

The CLI maps these onto its exit codes: usage problems (ConfigError,
ValueError) exit 1, data and format problems (ShapeError, FormatError,
DataError) exit 2, numeric failures (NumericError) exit 3.
"""


class ExpertnetError(Exception):
    """Base class for all library errors."""


class ShapeError(ExpertnetError):
    """Tensor extents are invalid or do not line up."""


class ConfigError(ExpertnetError):
    """Model config text is malformed or describes an impossible network."""


class FormatError(ExpertnetError):
    """A serialized byte stream (tensor dump, model file, netpbm) is invalid."""


class DataError(ExpertnetError):
    """Dataset ingestion, splitting or partitioning failed."""


class NumericError(ExpertnetError):
    """A non-finite value appeared where finite math was required."""
