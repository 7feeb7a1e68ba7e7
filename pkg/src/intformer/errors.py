"""Exception types shared across the package."""


class IntformerError(Exception):
    """Base class for all package errors."""


class DimensionError(IntformerError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(IntformerError, ValueError):
    """A configuration value is outside its valid domain."""


class EvaluationError(IntformerError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class NumericError(IntformerError, ArithmeticError):
    """Non-finite activations inside a model forward pass."""


class UndefinedPOGError(IntformerError, ValueError):
    """Percent-on-green requested for an interval with no vehicles."""


class CapacityError(IntformerError, ValueError):
    """More events requested than distinct slots are available."""


class GapError(IntformerError, ValueError):
    """A timestep is missing a leg snapshot."""

    def __init__(self, message, holes=()):
        super().__init__(message)
        self.holes = list(holes)


class DegenerateLabelsError(IntformerError, ValueError):
    """Labels contain a single class where two are required."""


class ResamplingError(IntformerError, ValueError):
    """Oversampling cannot proceed (e.g. no minority samples)."""


class UndefinedMetricError(IntformerError, ZeroDivisionError):
    """A rate metric has a zero denominator."""


class SizeError(IntformerError, ValueError):
    """Problem size exceeds what an exact method supports."""


class TrainingDivergedError(IntformerError, ArithmeticError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class DependencyError(IntformerError, RuntimeError):
    """A required upstream artifact is missing."""


class IntegrityError(IntformerError, RuntimeError):
    """An artifact changed after it was recorded."""
