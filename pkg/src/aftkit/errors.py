"""Exception hierarchy shared across the toolkit.

CLI exit codes: ConfigError/ContractError -> 2, DataError/FormatError -> 3,
NumericError -> 4.
"""


class AftError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(AftError):
    """Tensor dimensions incompatible with the requested operation."""


class ContractError(AftError):
    """An operation was called outside its documented contract."""


class ConfigError(AftError):
    """Invalid configuration value or combination."""


class NumericError(AftError):
    """NaN/Inf or other numeric breakdown during computation."""


class DegenerateEmbeddingError(NumericError):
    """A row to be L2-normalized has (near-)zero norm."""


class DataError(AftError):
    """Malformed dataset content (manifest lines, labels, pixel range)."""


class FormatError(DataError):
    """A binary file fails magic/version/structure validation."""
