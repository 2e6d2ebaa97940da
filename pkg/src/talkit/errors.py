"""Exception types shared across the toolkit."""


class TalError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TalError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(TalError, ValueError):
    """Input is too small or empty for the requested operation."""


class ConfigError(TalError, ValueError):
    """A configuration value violates a module precondition."""


class ContractError(TalError, RuntimeError):
    """An API was called in a way its contract forbids."""


class FormatError(TalError, ValueError):
    """A file on disk does not match its declared binary or text format."""
