class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration."""


class DataError(ValueError):
    """Unreadable or malformed sequence/checkpoint data."""


class NumericError(ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    raise error
