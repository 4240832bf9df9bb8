class ShapeError(ValueError):
    """Dimension or architecture mismatch."""


class NumericError(ArithmeticError):
    """A loss or value became non-finite."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload or {}


class InputError(ValueError):
    """Empty or malformed input data."""


class ConfigError(ValueError):
    """Invalid configuration, unknown variant, or missing checkpoint."""


class NotReady(RuntimeError):
    """Replay buffer holds too few transitions; retry after more data arrives."""
