class CompressionError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CompressionError, ValueError):
    pass


class NumericError(CompressionError, ArithmeticError):
    def __init__(self, message, layer=None, **context):
        super().__init__(message)
        self.layer = layer
        self.context = context


class ThinningError(CompressionError, ValueError):
    pass


class SchemeError(CompressionError, ValueError):
    pass


class SearchError(CompressionError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConfigError(CompressionError, ValueError):
    pass
