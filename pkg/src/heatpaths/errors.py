"""Error hierarchy shared by every module."""

from __future__ import annotations


class HeatPathsError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 3


class InvalidParameters(HeatPathsError):
    pass


class NonpositiveTimeInterval(HeatPathsError):
    pass


class CoincidentPoints(HeatPathsError):
    pass


class DimensionTooLow(HeatPathsError):
    pass


class QueryOutsideDomain(HeatPathsError):
    pass


class QuadratureUnderresolved(HeatPathsError):
    pass


class SeriesDivergenceSuspected(HeatPathsError):
    """Raised when correction terms keep growing; ``result`` holds what was computed."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class InsufficientCandidateSupport(HeatPathsError):
    pass


class SupportTruncation(HeatPathsError):
    pass


class ExtrapolationUnstable(HeatPathsError):
    pass


class CollarSelfIntersection(HeatPathsError):
    pass


class ResolutionViolation(HeatPathsError):
    pass


class WeightOverflow(HeatPathsError):
    pass


class OutOfValidityRegion(HeatPathsError):
    pass


class IncompatibleMethods(HeatPathsError):
    pass


class ConfigParse(HeatPathsError):
    exit_code = 2


class NumericalFailure(HeatPathsError):
    exit_code = 3
