"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class StateError(RuntimeError):
    """An operation was called on a model/trainer state that cannot support it."""


class NumericError(ArithmeticError):
    """Degenerate numeric input, e.g. a zero-norm feature row."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message)
