"""Shared exception types."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ArgumentError(ValueError):
    """An argument violates a documented precondition."""


class ContractError(RuntimeError):
    """Caller violated a usage contract (e.g. wrong model mode)."""


class DegenerateFitError(RuntimeError):
    """Detector training data contains only one class."""
