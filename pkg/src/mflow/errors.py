"""Exception types raised by the library."""


class MflowError(Exception):
    """Base class for all library errors."""


class DomainError(MflowError, ValueError):
    """Input lies outside the domain of a geometric operation (e.g. sphere antipode)."""


class DegenerateInputError(DomainError):
    """Projection or normalisation of a vector that has no well-defined image."""


class ChartOverflowError(MflowError):
    """Chart coordinates left the usable exponential-map ball.

    ``mask`` flags the offending batch rows when raised from a batched call.
    """

    def __init__(self, message, mask=None):
        super().__init__(message)
        self.mask = mask


class NumericError(MflowError, FloatingPointError):
    """Non-finite values encountered during integration."""

    def __init__(self, message, step=None, segment=None, anchor=None):
        super().__init__(message)
        self.step = step
        self.segment = segment
        self.anchor = anchor


class StepSizeError(MflowError):
    """An exp-map Euler step exceeded the injectivity radius."""


class TrainingError(MflowError):
    """Optimisation produced a non-finite loss or gradient."""


class ChecksumError(MflowError):
    """Checkpoint payload does not match its recorded checksum."""
