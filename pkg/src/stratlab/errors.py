"""Shared exception types used across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


class InputError(ValueError):
    """An argument violates the operation's input contract."""


class ConfigError(ValueError):
    """A configuration record is internally inconsistent."""


class ContractError(RuntimeError):
    """A caller broke an API precondition that is not data-dependent."""


class TruncationError(InputError):
    """A requested sequence would exceed the model's context window."""
