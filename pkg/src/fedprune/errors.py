"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid model, experiment or CLI configuration."""


class InputError(ValueError):
    """Invalid data passed to an operation (empty dataset, bad mask, ...)."""


class FormatError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
