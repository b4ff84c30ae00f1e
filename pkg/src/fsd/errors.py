"""Exception hierarchy shared across the pipeline."""


class FSDError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class UnreadableFile(FSDError, OSError):
    """I/O or decode failure (CLI exit code 2)."""


class TooSmall(FSDError):
    """Image or field too small for the configured window."""


class DegenerateOutput(FSDError):
    pass


class CodecFailure(FSDError):
    pass


class EmptyBatch(FSDError):
    pass


class EmptyCorpus(FSDError):
    pass


class NonFiniteLoss(FSDError):
    """Training or fitting diverged."""


class ShapeMismatch(FSDError):
    pass


class DimensionMismatch(FSDError):
    pass


class TooFewSamples(FSDError):
    pass


class DegenerateComponent(FSDError):
    pass


class EmptyValidation(FSDError):
    pass


class SingleCluster(FSDError):
    pass


class EmptyClass(FSDError):
    pass


class LengthMismatch(FSDError):
    pass


class BadMagic(FSDError):
    """File is not in the expected format (or is truncated)."""


class BadVersion(FSDError):
    pass


class InvariantViolation(FSDError):
    pass


class KindMismatch(FSDError):
    pass


class SizeMismatch(FSDError):
    pass
