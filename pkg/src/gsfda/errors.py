"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GsfdaError(Exception):
    pass


class ShapeError(GsfdaError, ValueError):
    """Operand shapes do not line up."""


class ConfigError(GsfdaError, ValueError):
    """Bad configuration or arguments that make an operation ill-posed."""


class UsageError(GsfdaError, RuntimeError):
    """API used out of order or with inconsistent state."""


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(GsfdaError, ArithmeticError):
    """A computation produced NaN or Inf."""


class TrainingError(NumericError):
    pass
