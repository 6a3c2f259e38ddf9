"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class FormatError(ValueError):
    """A file on disk does not match its expected binary or text layout."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (reuse, non-scalar loss, ...)."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""
