"""Shared error types."""


class NumericsError(RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""


class QuadratureError(NumericsError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class TrainingAbort(NumericsError):
    """Training stopped on a non-finite loss; carries the iteration and terms."""

    def __init__(self, message, iteration=None, breakdown=None):
        super().__init__(message)
        self.iteration = iteration
        self.breakdown = breakdown
