class RelsoError(Exception):
    """Base class for every error raised by relso"""


class ImproperlyConfigured(RelsoError):
    """Configuration is invalid or refers to something that cannot be loaded"""


class ValidationError(RelsoError):
    """Input data (datasets, checkpoints, splits) failed validation"""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = "row {}: {}".format(row, message)
        super().__init__(message)


class NumericalError(RelsoError):
    """A computation produced NaN/Inf"""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = "step {}: {}".format(step, message)
        super().__init__(message)


class ShapeError(RelsoError, ValueError):
    pass


class TapeError(RelsoError):
    pass


class BudgetExhausted(RelsoError):
    pass
