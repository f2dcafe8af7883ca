"""Exception types shared across the package."""


class MultirateError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MultirateError, ValueError):
    """Operands have incompatible or unexpected dimensions."""


class DomainError(MultirateError, ValueError):
    """A numeric argument is outside its legal range."""


class StateError(MultirateError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ContractError(MultirateError, ValueError):
    """A structural precondition is violated (e.g. truncation set is not a layer suffix)."""


class ConfigError(MultirateError, ValueError):
    """An experiment config is malformed; message carries the offending field path."""


class FormatError(MultirateError, ValueError):
    """A file being read does not match its expected binary layout."""
