"""Exception types shared across the package."""


class RefgameError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(RefgameError):
    """Tensor shapes are inconsistent; the message names the offending operand."""


class NumericError(RefgameError):
    """A computation received or produced non-finite values."""


class ConfigError(RefgameError):
    """An experiment config is invalid; the message names the offending key."""


class WorldSpecError(RefgameError):
    """A synthetic-world spec is inconsistent (e.g. vocabulary collisions)."""


class DataFormatError(RefgameError):
    """A container file failed to parse.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnknownLanguageError(RefgameError):
    """A language tag is not known to the agent or dataset."""
