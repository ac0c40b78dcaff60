"""Exception hierarchy shared by every module."""


class NoiseFitError(Exception):
    """Base class for all package errors."""


class ShapeError(NoiseFitError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(NoiseFitError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class UsageError(NoiseFitError, RuntimeError):
    """API used in a way its contract forbids."""


class ContractViolation(NoiseFitError, RuntimeError):
    """A caller-supplied function broke a stated precondition."""


class ConfigError(NoiseFitError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class InputError(NoiseFitError, ValueError):
    """Invalid data handed to an operation (empty tensor, bad token id...)."""


class NumericError(NoiseFitError, FloatingPointError):
    """A non-finite value appeared where finiteness is required."""


class EmptyTargetError(InputError):
    """A loss was requested over zero valid tokens."""


class StatisticalError(NoiseFitError, ValueError):
    """A statistical test cannot be computed on the given samples."""


class CheckpointError(NoiseFitError, OSError):
    """Checkpoint file is unreadable, truncated, corrupt or of the wrong version."""


class DatasetError(InputError):
    """Malformed dataset file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
