"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateMaskError(ValueError):
    """A softmax row has no allowed entries."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


class AssignmentInfeasibleError(ValueError):
    """More ground truths than predictions."""


class TrainingDivergenceError(RuntimeError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, message, step=None, parameter=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or inconsistent."""
