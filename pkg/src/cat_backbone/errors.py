"""Exception hierarchy shared across the package."""


class CatError(Exception):
    """Base class for all package errors."""


class ShapeError(CatError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DivisibilityError(ShapeError):
    """A spatial size is not divisible by the required patch/window size."""


class ConfigError(CatError, ValueError):
    """An architecture or run configuration is invalid."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


class NonFiniteError(CatError, FloatingPointError):
    """NaN or Inf appeared where finite values are required."""


class GradError(CatError, RuntimeError):
    """Misuse of the autodiff machinery (non-scalar loss, missing tape, ...)."""


class CheckpointFormatError(CatError):
    """A checkpoint container is malformed, truncated, or mismatched."""
