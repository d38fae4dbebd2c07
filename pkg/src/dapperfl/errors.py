"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class InputError(ValueError):
    """Runtime data handed to an operation violates its contract."""


class FormatError(ValueError):
    """An external file does not match the expected binary layout."""


class NumericError(ArithmeticError):
    """A numeric invariant broke (non-finite gradients or parameters)."""
