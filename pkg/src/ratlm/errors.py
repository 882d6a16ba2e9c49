"""Exception hierarchy.  Each class carries the CLI exit code it maps to."""


class RatError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(RatError, ValueError):
    exit_code = 1
    kind = "config"


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""

    kind = "dimension"


class DataError(RatError, ValueError):
    exit_code = 2
    kind = "data"


class NumericError(RatError, ArithmeticError):
    exit_code = 3
    kind = "numeric"


class ResourceError(RatError, MemoryError):
    exit_code = 4
    kind = "resource"


class StateError(RatError, RuntimeError):
    """A decoding cache does not fit the model it is used with."""

    exit_code = 1
    kind = "state"
