"""Exception hierarchy shared across the package."""


class SpacetimeRobustError(Exception):
    """Base class for all library errors."""


class ValidationError(SpacetimeRobustError, ValueError):
    """Bad user input (config, shapes, arguments)."""


class ColumnNotFound(ValidationError):
    pass


class NonNumericCell(ValidationError):
    def __init__(self, row, value=None):
        self.row = row
        self.value = value
        super().__init__(f"non-numeric or missing cell at data row {row}: {value!r}")


class SeriesTooShort(ValidationError):
    pass


class DegenerateSeries(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class IncompatibleLength(ValidationError):
    pass


class EmptyCalibrationSet(ValidationError):
    pass


class NotControllable(SpacetimeRobustError):
    pass


class NotObservable(SpacetimeRobustError):
    pass


class Unstable(SpacetimeRobustError):
    pass


class NoConvergence(SpacetimeRobustError):
    def __init__(self, iters, residual):
        self.iters = iters
        self.residual = residual
        super().__init__(f"no convergence after {iters} iterations (residual {residual:.3e})")


class NotLinearized(SpacetimeRobustError):
    pass


class UnregisteredPrimitive(SpacetimeRobustError):
    pass


class DetectorViolatedAtInit(SpacetimeRobustError):
    pass


class Infeasible(SpacetimeRobustError):
    pass


class ZeroInput(SpacetimeRobustError):
    pass


class NonFiniteLoss(SpacetimeRobustError):
    pass


class CheckpointError(SpacetimeRobustError):
    pass
