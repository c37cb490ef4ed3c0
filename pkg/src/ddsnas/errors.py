"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes or arguments."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during training or evaluation."""


class FormatError(ValueError):
    """Malformed or truncated binary file."""
