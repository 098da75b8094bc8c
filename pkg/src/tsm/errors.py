"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes do not agree with an operation's contract."""


class StateError(RuntimeError):
    """Raised when an operation is requested in an invalid state."""


class FormatError(ValueError):
    """Raised when a binary file does not conform to its format.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class TrainingError(RuntimeError):
    """Raised when optimisation diverges."""

    def __init__(self, message, iteration):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")
