"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class ConfigMismatch(ValueError):
    """Two configurations (or a config and a set of tensors) are incompatible."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupt, or of an unknown version."""


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""
