"""Exception types shared across the package."""


class MotionPriorError(Exception):
    """Base class for all package errors."""


class SchemaError(MotionPriorError):
    """A file failed to parse against its expected schema."""


class ValidationError(MotionPriorError):
    """Data parsed but violates an invariant or precondition."""


class ShapeError(MotionPriorError):
    """Tensor/vector dimensions do not agree."""


class SimulationDiverged(MotionPriorError):
    """The simulator produced a non-finite quantity."""

    def __init__(self, quantity: str, value):
        self.quantity = quantity
        self.value = value
        super().__init__(f"simulation diverged: {quantity} = {value}")


class ConfigError(MotionPriorError):
    """Bad configuration value or unknown option."""
