"""Exception hierarchy shared by all solver modules."""


class LinfSlamError(Exception):
    """Base class for every error raised by this package."""


class InvalidRotation(LinfSlamError, ValueError):
    pass


class NonPositiveDepth(LinfSlamError, ValueError):
    pass


class DisconnectedGraph(LinfSlamError):
    pass


class MissingNode(LinfSlamError, KeyError):
    pass


class NoEdgeToNewFrame(LinfSlamError):
    pass


class NonConvergence(LinfSlamError):
    pass


class DegenerateConfiguration(LinfSlamError):
    pass


class TooFewInliers(LinfSlamError):
    pass


class AmbiguousCheirality(LinfSlamError):
    pass


class InsufficientRays(LinfSlamError):
    pass


class NumericalFailure(LinfSlamError):
    pass


class BadBracket(LinfSlamError):
    pass


class ProbeViolatesLinear(LinfSlamError):
    pass


class Infeasible(LinfSlamError):
    """The constraint system admits no solution.

    ``details`` carries solver-specific diagnostics, e.g. the most violated
    direction edges for a translation-direction problem.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class UnderconstrainedTrack(LinfSlamError):
    pass


class MissingRotation(LinfSlamError, KeyError):
    pass


class AllMeasurementsRemoved(LinfSlamError):
    pass


class AlphaOutOfRange(LinfSlamError, ValueError):
    pass


class DivergedOrStalled(LinfSlamError):
    pass


class CameraDisconnected(LinfSlamError):
    pass


class BadParams(LinfSlamError, ValueError):
    pass


class FrameMismatch(LinfSlamError, ValueError):
    pass
