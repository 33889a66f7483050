"""Exception hierarchy. Each class carries the CLI error category."""


class AvinsError(Exception):
    category = "solver"


class ConfigError(AvinsError):
    category = "config"


class DataError(AvinsError):
    category = "data"


class SolverError(AvinsError):
    category = "solver"


class ObservabilityError(AvinsError):
    category = "observability"


class RankDeficientGeometry(DataError):
    pass


class EmptySampleSet(DataError):
    pass


class NonMonotoneTime(DataError):
    pass


class MissingVelocity(DataError):
    pass


class BehindCamera(DataError):
    pass


class NoOverlap(DataError):
    pass


class SingularNormalEquations(SolverError):
    pass


class NonFiniteCost(SolverError):
    pass


class TooFewObservations(ObservabilityError):
    pass


class InsufficientParallax(ObservabilityError):
    pass


class InsufficientExcitation(ObservabilityError):
    pass


class DegenerateMotion(ObservabilityError):
    pass
