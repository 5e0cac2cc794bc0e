"""Exception hierarchy shared by every fedpeft module."""

from __future__ import annotations


class FedPeftError(Exception):
    """Base class for all errors raised by fedpeft."""


class ShapeError(FedPeftError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class InputError(FedPeftError, ValueError):
    """An argument value is outside the accepted domain."""


class ConfigError(FedPeftError, ValueError):
    """Invalid configuration value.

    Attributes:
        field: Dotted path of the offending field, e.g. ``"pruning.sparsity"``.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ProtocolError(FedPeftError, RuntimeError):
    """The federation protocol was violated (bad update set, malformed payload)."""


class NumericalError(FedPeftError, ArithmeticError):
    """A computation produced non-finite values."""
