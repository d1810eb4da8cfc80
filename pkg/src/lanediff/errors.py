"""Exception types raised by lanediff beyond the builtin ones."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration or checkpoint pairing."""


class NumericalError(FloatingPointError):
    """A loss, gradient or parameter became non-finite."""
