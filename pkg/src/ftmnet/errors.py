"""Exception types shared across the package."""


class FtmnetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FtmnetError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(FtmnetError):
    """A computation produced NaN/Inf or received non-finite operands."""


class ContractError(FtmnetError):
    """An API precondition was violated by the caller."""


class ConfigError(FtmnetError):
    """A configuration value is out of its legal range or inconsistent."""


class DataError(FtmnetError):
    """A dataset is empty, unreadable, or otherwise malformed."""


class InsufficientDataError(DataError):
    """A class has fewer items than an episode requires."""


class TaxonomyError(FtmnetError):
    """A fine class has no coarse mapping."""


class CheckpointFormatError(FtmnetError):
    """A checkpoint file is corrupt; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
