class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class StateError(RuntimeError):
    """An operation was called without the state it depends on."""


class FormatError(ValueError):
    """A binary tensor file is malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
