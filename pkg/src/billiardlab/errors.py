"""Exception taxonomy shared across the lab.

Two base classes drive the CLI exit codes: configuration / validation
problems exit 2, numerical failures exit 3.
"""


class ValidationFailure(Exception):
    """Bad input: geometry, config, or contract preconditions."""

    exit_code = 2


class NumericalFailure(Exception):
    """The computation itself broke down (resolution, divergence, ...)."""

    exit_code = 3


# geometry / table
class OverlapError(ValidationFailure):
    pass


class DisconnectedError(ValidationFailure):
    pass


class NotOnBoundary(ValidationFailure):
    pass


# dynamics
class NoCollisionWithinBound(NumericalFailure):
    pass


class GrazingOrbit(NumericalFailure):
    """Trajectory hit a scatterer below the grazing tolerance; discard it."""


# wavefront transport
class FocusingSingularity(NumericalFailure):
    pass


class GrazingError(NumericalFailure):
    pass


# curves
class ConeViolation(ValidationFailure):
    pass


class CurvatureViolation(ValidationFailure):
    pass


class TooLong(ValidationFailure):
    pass


class AngleViolation(ValidationFailure):
    pass


class NonPositiveDensity(ValidationFailure):
    pass


class ResolutionExceeded(NumericalFailure):
    pass


# holonomy
class NotGoodCurve(ValidationFailure):
    pass


class NoCrossing(NumericalFailure):
    pass


class AmbiguousMatch(NumericalFailure):
    pass


class NotInProduct(ValidationFailure):
    pass


class OutOfDisk(ValidationFailure):
    pass


# norms
class InfeasibleExtension(ValidationFailure):
    """Extension interval empty: the data was not (C, alpha)-Holder."""
