"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, counts or settings."""


class DomainError(ValueError):
    """A parameter lies outside the range where a quantity is defined."""


class CalibrationError(RuntimeError):
    """CFAR calibration could not reach the requested false-alarm rate."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class SingularFisherError(ValueError):
    """Fisher information too ill-conditioned to invert."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition
