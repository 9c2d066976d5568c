class ConfigError(ValueError):
    """Invalid configuration or missing setup (CLI exit code 1)."""


class DataFormatError(ValueError):
    """Malformed input data (CLI exit code 2). ``offset`` is a byte position when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(RuntimeError):
    """Training diverged (CLI exit code 3). ``state`` holds the last finite network, if any."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state
