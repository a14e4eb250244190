"""Exception hierarchy shared by every module of the package."""


class PerceparatorError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(PerceparatorError, ValueError):
    pass


class InvalidConfig(PerceparatorError, ValueError):
    pass


class HeadsDoNotDivideF(InvalidConfig):
    pass


class InputTooShort(PerceparatorError, ValueError):
    pass


class LayoutMismatch(PerceparatorError, ValueError):
    pass


class NonFiniteError(PerceparatorError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class NonFiniteGradient(NonFiniteError):
    pass


class NonScalarLoss(PerceparatorError, ValueError):
    pass


class LengthMismatch(PerceparatorError, ValueError):
    pass


class DegenerateReference(PerceparatorError, ValueError):
    pass


class TooManySources(PerceparatorError, ValueError):
    pass


class TooFewItems(PerceparatorError, ValueError):
    pass


class UnsupportedFormat(PerceparatorError, ValueError):
    pass


class ConfigError(PerceparatorError, ValueError):
    """Bad run configuration; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(PerceparatorError):
    pass


class CorruptChecksum(CheckpointError):
    pass


class FormatVersionMismatch(CheckpointError):
    pass


class TrainingDiverged(NonFiniteError):
    def __init__(self, batch_index, cause):
        super().__init__(f"non-finite value in batch {batch_index}: {cause}")
        self.batch_index = batch_index
