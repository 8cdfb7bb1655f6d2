"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for validation problems,
3 for numerical failures.
"""
from __future__ import annotations


class PeftOcrError(Exception):
    exit_code = 2


class ConfigurationError(PeftOcrError, ValueError):
    """Invalid dimensions, ranks, strategies or config keys."""


class DimensionError(PeftOcrError, ValueError):
    pass


class GradientShapeError(DimensionError):
    pass


class VocabularyError(PeftOcrError, ValueError):
    pass


class CompatibilityError(PeftOcrError, ValueError):
    pass


class ManifestError(PeftOcrError, ValueError):
    pass


class GenerationError(PeftOcrError, ValueError):
    pass


class UndefinedMetricError(PeftOcrError, ValueError):
    pass


class EmptyLossError(PeftOcrError, ValueError):
    pass


class AdapterStateError(PeftOcrError, RuntimeError):
    """Double merge, double injection and similar state-machine violations."""


class SetupError(PeftOcrError, RuntimeError):
    pass


class CheckpointError(PeftOcrError, ValueError):
    pass


class DegenerateWeightError(PeftOcrError, ValueError):
    def __init__(self, column: int):
        super().__init__(f"base weight column {column} has zero norm")
        self.column = column


class NumericalError(PeftOcrError, ArithmeticError):
    exit_code = 3


class NormalizationSingularityError(NumericalError):
    pass


class TrainingDivergenceError(NumericalError):
    """Raised on a non-finite loss or gradient.

    ``last_good`` holds a snapshot of the model state from before the failing
    step, when one is available.
    """

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
