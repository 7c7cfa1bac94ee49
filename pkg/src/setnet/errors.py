"""Exception hierarchy shared by every setnet module."""

from __future__ import annotations


class SetNetError(Exception):
    """Base class for all setnet errors."""


class DimensionError(SetNetError):
    """Operand shapes do not conform."""


class NumericError(SetNetError):
    """A NaN reached an operation input."""


class ContractError(SetNetError):
    """An API precondition was violated by the caller."""


class DegenerateInputError(SetNetError):
    """A statistics group contains no valid element."""


class ConfigError(SetNetError):
    """A configuration value is inconsistent."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class UninitializedStatisticsError(SetNetError):
    """Eval-mode feature norm used before any training step."""


class DivergenceError(SetNetError):
    """Training produced a non-finite or exploding quantity."""


class CheckpointError(SetNetError):
    """A model checkpoint could not be decoded."""


class DatasetParseError(SetNetError):
    """A SETD file could not be decoded."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(DatasetParseError):
    pass


class TruncationError(DatasetParseError):
    pass


class VersionMismatchError(DatasetParseError):
    pass
