"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Input failed validation (non-SPD metric, degenerate node, bad field shape)."""


class StepRejectedError(RuntimeError):
    """A time step produced an invalid state; the caller may retry with smaller dt."""


class GaugeBreakdownError(RuntimeError):
    """The evolving diffeomorphism lost injectivity.

    Carries ``time``, the first time at which the injectivity proxy failed.
    """

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class NonConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    Carries ``last_iterate`` so the caller can inspect or restart.
    """

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class InsufficientDataError(ValueError):
    """Not enough usable samples for the requested fit or diagnostic."""


class NumericalFailureError(RuntimeError):
    """A dense solver or eigendecomposition failed."""
