"""Exception hierarchy shared by every module."""


class SelectProtoError(Exception):
    pass


class DimensionError(SelectProtoError, ValueError):
    """Operand shapes do not agree."""


class ContractError(SelectProtoError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(SelectProtoError, ArithmeticError):
    """NaN or Inf appeared in a forward or backward pass."""


class CapacityError(SelectProtoError, ValueError):
    """Not enough classes, tasks or samples to satisfy a request."""


class IngestionError(SelectProtoError, ValueError):
    """A CSV or manifest could not be parsed."""


class CheckpointError(SelectProtoError, ValueError):
    """A checkpoint file is corrupt, truncated or incompatible."""
