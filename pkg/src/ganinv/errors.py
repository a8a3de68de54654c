"""Exception hierarchy shared by every ganinv module."""


class GanInvError(Exception):
    """Base class for all ganinv errors."""


class DimensionError(GanInvError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(GanInvError, ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingDivergenceError(NumericError):
    """GAN training produced a non-finite loss."""


class ModeError(GanInvError, ValueError):
    """Batch-normalization mode cannot be used with this batch."""


class TraceError(GanInvError, ValueError):
    """A forward trace does not belong to the network being differentiated."""


class DomainError(GanInvError, ValueError):
    """An input lies outside the domain of the function."""


class ConfigError(GanInvError, ValueError):
    """Invalid or inconsistent configuration."""


class ArchParseError(ConfigError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class WeightFileError(GanInvError, IOError):
    """Base class for weight-file load failures."""


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ExtentMismatchError(WeightFileError):
    pass


class IdxFormatError(GanInvError, IOError):
    """Malformed IDX image file."""
