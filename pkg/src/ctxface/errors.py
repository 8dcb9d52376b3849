"""Exception types shared across the package and their CLI exit codes."""


class DimensionError(ValueError):
    """Operand shapes or latent sizes do not agree."""


class ConfigurationError(RuntimeError):
    """Missing checkpoints, bad config keys, or a forbidden training setup."""


class DataError(OSError):
    """Unreadable media or a malformed manifest."""


class NumericError(ArithmeticError):
    """A loss or latent became non-finite."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_CONFIG
