"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid architecture, schedule, strategy or training configuration."""


class InputError(ValueError):
    """Invalid call-time input (out-of-range label or timestep, bad shapes)."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(ArithmeticError):
    """A loss or intermediate became NaN or infinite."""
