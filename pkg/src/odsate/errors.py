"""Exception hierarchy shared by the estimators, the harness and the CLI."""


class OdsateError(Exception):
    """Base class for all package errors."""


class DomainError(OdsateError, ValueError):
    """An input violates a mathematical constraint.

    ``constraint`` names the violated condition so front ends can report it.
    """

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class DegenerateSample(OdsateError):
    """The observed outcome has a single class."""


class DegenerateTreatment(OdsateError):
    """Only one treatment arm is present."""


class NonConvergence(OdsateError):
    def __init__(self, message, theta=None, score_norm=None, iterations=None):
        super().__init__(message)
        self.theta = theta
        self.score_norm = score_norm
        self.iterations = iterations


class SingularJacobian(OdsateError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class RangeCollapse(OdsateError):
    """Too many fitted means sit on the probability clamp."""


class IllConditioned(OdsateError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class AllGridFailed(OdsateError):
    pass


class CalibrationFailure(OdsateError):
    pass


class InsufficientClass(OdsateError):
    def __init__(self, message, label=None, available=None):
        super().__init__(message)
        self.label = label
        self.available = available


class ParseError(OdsateError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(OdsateError):
    pass


class IllConditionedWarning(RuntimeWarning):
    """Emitted when a sandwich bread matrix needs a ridge perturbation."""
