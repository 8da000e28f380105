# app/core/errors.py


class ShapeRegressionError(Exception):
    """Base class for all errors raised by the engine."""


class ConfigurationError(ShapeRegressionError, ValueError):
    pass


class UnknownInstanceError(ConfigurationError):
    pass


class ExpressionParseError(ShapeRegressionError, ValueError):
    pass


class MetricError(ShapeRegressionError, ValueError):
    pass


class NoModelError(ShapeRegressionError, RuntimeError):
    """Raised when a run ends without any model with finite fitness."""


class SamplingError(ShapeRegressionError, RuntimeError):
    pass
