"""Exception hierarchy shared by every subsystem.

Each error carries the name of the component that raised it so the CLI can
report where a failure originated.
"""


class SumError(Exception):
    component = "summuscat"

    def __init__(self, message, *, component=None):
        super().__init__(message)
        if component is not None:
            self.component = component


class ShapeError(SumError, ValueError):
    """Array dimensions are inconsistent."""


class ParameterError(SumError, ValueError):
    """A scalar or configuration value is out of its allowed range."""


class DataFormatError(SumError, ValueError):
    """On-disk data or config content is malformed."""


class DatasetIOError(SumError, OSError):
    """A required file is missing or unreadable."""


class NumericError(SumError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, *, block=None, component=None):
        super().__init__(message, component=component)
        self.block = block


class DivergenceError(NumericError):
    def __init__(self, message, *, iteration=None, component=None):
        super().__init__(message, component=component)
        self.iteration = iteration
