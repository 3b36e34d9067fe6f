"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite value."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class InsufficientSamplesError(ValueError):
    """An estimator was given fewer samples than it needs."""


class VariantError(ValueError):
    """An adapter operation was called with the wrong adapter variant."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested operation."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class DegenerateHeadError(ValueError):
    """A head matrix has zero norm, so cosine similarity is undefined."""


class NotMergeableError(RuntimeError):
    """The adapter's weight update is input-dependent and cannot be folded
    into the base weight."""

    def __init__(self, reason: str = "input-dependent routing"):
        super().__init__(f"not mergeable: {reason}")
        self.reason = reason
