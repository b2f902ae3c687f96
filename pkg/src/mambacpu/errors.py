"""Exception types shared across the package."""


class MacError(Exception):
    """Base class for all package errors."""


class DimensionError(MacError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(MacError, ValueError):
    """A call violated an operation's precondition."""


class ConfigError(MacError, ValueError):
    """Model or training configuration is invalid."""


class SchemaError(MacError, ValueError):
    """Feature schema and data disagree."""


class RowError(MacError, ValueError):
    """A specific data row could not be parsed."""


class DataError(MacError, ValueError):
    """Input data violates an expected property (debug-mode checks)."""


class CheckpointError(MacError, ValueError):
    """Checkpoint file is malformed or incompatible with the schema."""


class SolverError(MacError, ValueError):
    """A linear solve failed (typically a singular system)."""


class TrainingDiverged(MacError, RuntimeError):
    """Training produced a non-finite loss."""
