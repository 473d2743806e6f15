"""Exception hierarchy shared by all solvers.

Two families matter to callers: :class:`ValidationError` for bad inputs
(a model that produces negative rates, a start state past the target, ...)
and :class:`NumericalError` for computations that were attempted and did
not converge or have no finite answer.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NumericalError(ArithmeticError):
    """A well-posed computation failed or has no finite value."""


class ModelError(ValidationError):
    """Rate law is invalid, e.g. an evaluated rate is negative."""


class DomainError(ValidationError):
    """Argument lies outside the domain of the operation."""


class PreconditionError(ValidationError):
    """Structural precondition (curvature sign, extremum count, ...) fails."""


class AbsorbingModelError(ValidationError):
    """Operation needs a non-absorbing model but state 0 is absorbing."""


class InfiniteMFPTError(NumericalError):
    """The requested passage never happens with probability one."""


class TruncationError(NumericalError):
    """State-space truncation could not meet its tail-mass criterion.

    Attributes
    ----------
    tail_mass : float
        Estimated relative probability mass beyond the last state kept.
    """

    def __init__(self, message, tail_mass):
        super().__init__(message)
        self.tail_mass = tail_mass


class QuadratureError(NumericalError):
    """Numerical integration did not reach the requested tolerance."""


class SingularIntegrandError(QuadratureError):
    """Integrand is singular inside the integration interval.

    Attributes
    ----------
    location : float
        Point where a rate coefficient vanishes.
    """

    def __init__(self, message, location):
        super().__init__(message)
        self.location = location


class RefinementRequired(NumericalError):
    """Grid is too coarse to resolve the requested structure."""
