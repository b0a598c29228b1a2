"""Exception types shared across the package."""


class TalkmeshError(Exception):
    """Base class for all package errors."""


class ShapeError(TalkmeshError):
    """Operands have incompatible shapes."""


class ContractError(TalkmeshError):
    """A precondition or invariant of an operation was violated."""


class ConfigError(TalkmeshError):
    """Invalid configuration value or combination."""


class NumericError(TalkmeshError):
    """Non-finite values where finite ones are required (NaN loss, NaN input)."""


class SessionExhausted(TalkmeshError):
    """A decode session was stepped past the end of its audio."""
