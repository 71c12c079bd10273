"""Exception hierarchy shared by every module."""


class UnmixersError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UnmixersError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(UnmixersError, ValueError):
    """A precondition on an argument (not its shape) was violated."""


class NumericError(UnmixersError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class StabilityError(NumericError):
    """State matrix is not strictly negative, so the recurrence may diverge."""


class ConfigError(UnmixersError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(UnmixersError, ValueError):
    """A dataset file could not be parsed or is incomplete."""


class ChecksumError(UnmixersError):
    """Checkpoint body does not match its trailing CRC32."""


class IncompatibleCheckpointError(UnmixersError):
    """Checkpoint was written by an unsupported format version."""


class VerificationError(UnmixersError):
    """An internal consistency gate (gradient check, scan equivalence) failed."""
