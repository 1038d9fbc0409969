"""Exception hierarchy shared by all subctrl modules."""


class SubctrlError(Exception):
    """Base class for every error raised by subctrl."""


class ConfigError(SubctrlError, ValueError):
    """Invalid configuration, parameter, or input document."""


class ExpressionSyntaxError(ConfigError):
    """Malformed arithmetic expression; carries the offending position."""

    def __init__(self, message, text, position):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position} in {text!r}")


class DimensionMismatchError(ConfigError):
    """Expression references a variable beyond the declared dimension."""


class EvaluationError(SubctrlError, ArithmeticError):
    """A vector field or velocity produced non-finite values."""

    def __init__(self, message, point=None, field=None):
        self.point = point
        self.field = field
        super().__init__(message)


class DomainError(SubctrlError, ValueError):
    """A point lies outside the discretized domain."""


class ConvergenceError(SubctrlError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class NotControllableError(SubctrlError):
    """The operator has a near-kernel on mean-zero functions.

    This is a certified negative outcome rather than a failure: the system
    is not certifiably controllable at the configured gap floor.
    """

    def __init__(self, message, gap=None, floor=None):
        self.gap = gap
        self.floor = floor
        super().__init__(message)


class DensityBoundError(ConfigError):
    """A density drops below the required positive lower bound."""

    def __init__(self, message, node=None, time_index=None):
        self.node = node
        self.time_index = time_index
        super().__init__(message)
