"""Exception hierarchy shared across the package."""


class GateFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(GateFuseError, ValueError):
    pass


class InvalidMaskError(GateFuseError, ValueError):
    pass


class TrackingError(GateFuseError, RuntimeError):
    pass


class ConfigurationError(GateFuseError, ValueError):
    pass


class LayoutError(GateFuseError, ValueError):
    pass


class SpanError(GateFuseError, ValueError):
    pass


class EmptyModalityError(GateFuseError, ValueError):
    pass


class InputError(GateFuseError, ValueError):
    pass


class DivergenceError(GateFuseError, ArithmeticError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class ArtifactError(GateFuseError, ValueError):
    """A checkpoint or dataset on disk does not match what was expected."""
