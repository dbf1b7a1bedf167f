"""
Error hierarchy for the two-disk Green's function library.

Every failure raised by the library derives from TwoDiskError so callers
(the CLI in particular) can catch one type per job and record it.
"""

from typing import Optional


class TwoDiskError(Exception):
    """Base class for all library errors."""


class InvalidConfigurationError(TwoDiskError, ValueError):
    """Configuration values outside the supported regime."""


class AmbiguousEvaluationError(TwoDiskError):
    """A point lies on an interface and no side hint was given."""


class PoleError(TwoDiskError):
    """A fractional-linear map was applied exactly at its pole."""


class NearPoleError(TwoDiskError):
    """The denominator of a map is too small for a reliable evaluation."""


class DegenerateMapError(TwoDiskError):
    """A composed matrix has zero determinant."""


class SingularEvaluationError(TwoDiskError):
    """Evaluation requested at a genuine (non-removable) singularity."""


class InvalidContourError(TwoDiskError):
    """A flux contour crosses an interface or encloses a disk center."""


class TooCloseToInterfaceError(TwoDiskError):
    """Finite-difference stencil would straddle an interface."""


class ResolutionError(TwoDiskError):
    """A grid does not resolve the gap between the disks."""


class ShapeMismatchError(TwoDiskError):
    """Two sampled fields do not live on the same grid."""


class TruncationError(TwoDiskError):
    """
    A reflection series did not reach its tolerance within max_terms.

    The partial sum is kept so that callers can still inspect it.
    """

    def __init__(self, message: str, partial_value=None, terms_used: int = 0,
                 tail_estimate: float = float("inf")):
        super().__init__(message)
        self.partial_value = partial_value
        self.terms_used = terms_used
        self.tail_estimate = tail_estimate


class QuadratureError(TwoDiskError):
    """Adaptive quadrature refinement did not converge."""

    def __init__(self, message: str, partial_value=None,
                 error_estimate: Optional[float] = None):
        super().__init__(message)
        self.partial_value = partial_value
        self.error_estimate = error_estimate


class SolverError(TwoDiskError):
    """The finite-volume iterative solve did not converge."""

    def __init__(self, message: str, iterations: int = 0,
                 residual: Optional[float] = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
