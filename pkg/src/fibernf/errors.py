"""Exception hierarchy for fibernf."""

import numpy as np


class NormalFormError(Exception):
    """Base class of all errors raised by fibernf."""


class ExpressionError(NormalFormError):
    """Problem with a Hamiltonian expression."""

    def __init__(self, message, position=None, text=None):
        self.position = position
        self.text = text
        if position is not None:
            message = f"{message} (at position {position})"
            if text is not None:
                message += f"\n  {text}\n  {' ' * position}^"
        super().__init__(message)


class ExpressionSyntaxError(ExpressionError):
    pass


class UnknownIdentifierError(ExpressionError):
    pass


class DimensionMismatchError(ExpressionError):
    pass


class NonFiniteError(NormalFormError, FloatingPointError):
    """An evaluation produced inf or nan."""

    def __init__(self, what, point=None):
        self.point = None if point is None else np.asarray(point, dtype=float)
        msg = f"non-finite value in {what}"
        if point is not None:
            msg += f" at point {np.array2string(self.point, precision=17)}"
        super().__init__(msg)


class DerivativeOrderError(NormalFormError, ValueError):
    pass


class SPDError(NormalFormError, np.linalg.LinAlgError):
    """A matrix that must be symmetric positive definite is not."""


class ConvexityError(NormalFormError):
    pass


class SingularJacobianError(NormalFormError, np.linalg.LinAlgError):
    pass


class ShrinkDelta(NormalFormError):
    """A construction is only valid on a shorter segment; retry with smaller delta."""


class FlowBoxError(ShrinkDelta):
    """The generating field has too small a first component on the tube."""


class CriticalPointError(NormalFormError):
    """The orbit has zero velocity, so it cannot be straightened."""


class IntegrationError(NormalFormError):
    pass


class HomogeneityError(NormalFormError):
    pass


class TransferError(NormalFormError):
    pass


class RecipeError(NormalFormError):
    pass


def check_finite(values, points, what):
    """Raise NonFiniteError naming the first offending point."""
    values = np.asarray(values)
    if np.all(np.isfinite(values)):
        return values
    bad = ~np.isfinite(values)
    if bad.ndim > 1:
        bad = bad.reshape(bad.shape[0], -1).any(axis=1)
    points = np.asarray(points)
    idx = int(np.flatnonzero(bad)[0]) if points.ndim > 1 else None
    raise NonFiniteError(what, points[idx] if idx is not None else points)
