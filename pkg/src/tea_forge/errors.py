"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, TrainingDivergedError -> 4.
"""


class TeaForgeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TeaForgeError):
    """Invalid configuration value, unknown key, or conflicting flags."""


class DataError(TeaForgeError):
    """Problem with an input dataset."""


class ParseError(DataError):
    """Malformed line in a dataset file (carries file and line number)."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ValidationError(DataError):
    """Structurally well-formed input that violates a model invariant."""


class ShapeError(TeaForgeError):
    """Operands with incompatible shapes."""


class DegenerateRowError(TeaForgeError):
    """A softmax row with no finite entry."""


class ContractViolationError(TeaForgeError):
    """An operation was called outside its documented protocol
    (stale cache, stages out of order, mismatched similarity sources)."""


class TrainingDivergedError(TeaForgeError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class UnusableRetrievalError(DataError):
    """Top-k retrieval excluded every training seed from the consensus loss."""
