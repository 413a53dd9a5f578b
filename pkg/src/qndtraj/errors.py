"""Numerical guard errors raised during integration."""


class NumericalError(RuntimeError):
    """Base class for integration guards (CLI exit code 3)."""


class StepTooLarge(NumericalError):
    """The jump intensity bound ``max v_i * dt <= 0.1`` is violated."""


class StateInvalid(NumericalError):
    """A step produced an eigenvalue below the repair threshold."""


class GridMismatch(ValueError):
    """A record or noise path does not live on the requested time grid."""


class DegenerateFilter(NumericalError):
    """A recorded jump arrived while the filter assigned it zero intensity."""


class DegenerateConditioning(ValueError):
    """The conditioning pointer has zero intensity on a counting channel."""


class InsufficientWindow(ValueError):
    """Fewer than 10 grid points in a slope-fitting window."""
