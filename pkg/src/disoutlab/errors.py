"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, key, or combination."""


class FormatError(ValueError):
    """Malformed data file, checkpoint, or config file."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class TrainingDiverged(RuntimeError):
    """Training loss went non-finite; carries the partial metrics log."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []
