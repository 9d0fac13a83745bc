class ObshomError(Exception):
    """Base class for every error raised by obshom."""


class InvalidGridError(ObshomError, ValueError):
    pass


class GridMismatchError(ObshomError, ValueError):
    pass


class SamplingError(ObshomError, ValueError):
    pass


class EmptyRegionError(ObshomError, ValueError):
    pass


class DegenerateSetError(ObshomError, ValueError):
    pass


class ResolutionError(ObshomError, ValueError):
    pass


class ObstacleRangeError(ObshomError, ValueError):
    pass


class EllipticityError(ObshomError, ValueError):
    def __init__(self, message, node=None, value=None):
        super().__init__(message)
        self.node = node
        self.value = value


class DomainError(ObshomError, ValueError):
    pass


class RangeError(ObshomError, ValueError):
    pass


class ConfigError(ObshomError, ValueError):
    pass


class NonConvergenceError(ObshomError, RuntimeError):
    def __init__(self, message, residual=None, sweeps=None):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class InfeasibilityError(ObshomError, RuntimeError):
    pass


class FitError(ObshomError, RuntimeError):
    pass


class ExperimentError(ObshomError, RuntimeError):
    pass


class InvariantViolation(ObshomError, RuntimeError):
    """A verified property failed beyond its slack. Carries the margin report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
