"""Exception hierarchy shared by all modules."""


class StogeoError(Exception):
    """Base class for toolkit errors."""


class DomainError(StogeoError, ValueError):
    """A point lies outside a chart domain or a grid."""


class NumericError(StogeoError, ArithmeticError):
    """Singular or non-finite numerical data."""


class ShapeError(StogeoError, ValueError):
    pass


class ConvergenceError(NumericError):
    pass


class PositivityError(NumericError):
    """A solution that must stay positive did not."""


class SchemeError(NumericError):
    pass


class EstimationError(StogeoError):
    """Kernel regression had no usable cell."""


class InconsistentFieldError(StogeoError):
    """A (p, o) field violates the Maxwell relations."""


class UnsupportedFormError(StogeoError):
    pass


class PreconditionError(StogeoError):
    pass


class ConfigError(StogeoError):
    """Invalid run configuration. ``messages`` lists every problem found."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))
