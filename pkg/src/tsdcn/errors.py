"""Exception types raised across the package."""


class TsdcnError(Exception):
    """Base class for all package errors."""


class NumericalError(TsdcnError):
    """A forward or backward pass produced a zero or non-finite normalizer."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class InvalidParams(TsdcnError):
    pass


class RankDeficient(TsdcnError):
    pass


class DegenerateMatrix(TsdcnError):
    pass


class StepFailure(TsdcnError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class DegenerateData(TsdcnError):
    pass


class EmptyInput(TsdcnError):
    pass
