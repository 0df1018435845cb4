"""Exception types shared across the package."""


class FormatError(ValueError):
    """Base class for binary/text file format violations."""


class BadMagicError(FormatError):
    pass


class FormatVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class FeatureDimMismatchError(FormatError):
    pass


class InvalidDistributionError(ValueError):
    """Per-pixel depth probabilities do not form a distribution."""


class MissingPoseError(KeyError):
    """No ego pose registered for a point's timestamp."""


class EmptyBatchError(ValueError):
    """A query batch ended up with no usable samples."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""
