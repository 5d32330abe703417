"""Exception types raised across the package."""


class HopperError(Exception):
    """Base class for all package errors."""


class InvalidParameters(HopperError, ValueError):
    pass


class SingularConstraint(HopperError):
    """``J M^-1 J^T`` is numerically singular for the requested domain."""


class AmbiguousEvent(HopperError):
    """Two guards fired inside the same event-tolerance window."""


class StepFailure(HopperError):
    """The adaptive integrator hit its minimum step size."""


class SimulationDiverged(HopperError):
    """The hybrid simulation left its admissible region or blew up."""


class InfeasibleStructure(HopperError, ValueError):
    """A phase sequence that is not a path in the model's directed cycle."""


class NotConverged(HopperError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class FixedPointResidualTooLarge(HopperError):
    pass


class MismatchedGrids(HopperError, ValueError):
    pass


class NoImprovement(HopperError):
    pass
