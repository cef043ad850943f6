"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(FloatingPointError):
    """A non-finite value was produced or consumed where finiteness is required."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class CheckpointError(IOError):
    """A checkpoint file is malformed, truncated, or fails its integrity check."""
