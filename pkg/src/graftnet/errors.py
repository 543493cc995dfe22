"""Exception types raised across the package."""


class GraftError(Exception):
    """Base class for package errors."""


class DimensionError(GraftError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateBatchError(GraftError, ValueError):
    """Batch statistics are undefined (a single element per channel)."""


class NonFiniteError(GraftError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class BackwardError(GraftError, RuntimeError):
    """Misuse of the differentiation tape."""


class CapacityError(GraftError, ValueError):
    """An attention matrix would exceed the configured position cap."""


class DomainError(GraftError, ValueError):
    """Input values fall outside the operation's domain."""


class ImageFormatError(GraftError, IOError):
    """Malformed or unsupported PPM/PGM file."""


class TrainingDivergedError(GraftError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step, breakdown):
        self.step = step
        self.breakdown = breakdown
        parts = ", ".join(f"{k}={v}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")
