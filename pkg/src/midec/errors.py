"""Exception types shared across the package."""


class MidecError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(MidecError, ValueError):
    """Raised when a function argument violates its documented contract."""


class InvalidConfigError(MidecError, ValueError):
    """Raised when a configuration value is out of range or inconsistent."""


class SequenceTooLongError(InvalidInputError):
    """Raised when a token sequence exceeds the configured maximum length."""


class EnumerationTooLargeError(MidecError):
    """Raised when an exhaustive search would exceed its enumeration cap."""


class NumericalError(MidecError, ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""


class CheckpointError(MidecError):
    """Base class for checkpoint serialization errors."""


class CorruptCheckpointError(CheckpointError):
    """Raised when a checkpoint file is truncated or structurally invalid."""


class UnsupportedFormatError(CheckpointError):
    """Raised when a checkpoint has an unknown magic tag or version."""
