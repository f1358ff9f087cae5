"""Exception hierarchy shared across the package."""


class VoxnasError(Exception):
    pass


class DimensionError(VoxnasError, ValueError):
    """Tensor shapes do not line up."""


class GeometryError(VoxnasError, ValueError):
    """A convolution window does not fit its input."""


class ArchitectureError(VoxnasError, ValueError):
    pass


class ArchParseError(ArchitectureError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class CheckpointError(VoxnasError):
    """Checkpoint file is truncated, corrupt or has the wrong format."""


class DatasetFormatError(VoxnasError):
    pass


class CapExceededError(VoxnasError):
    """A morph action would exceed the configured size caps."""


class DivergedError(VoxnasError, ArithmeticError):
    def __init__(self, epoch, state_id=None):
        self.epoch = epoch
        self.state_id = state_id
        where = "" if state_id is None else f" (state {state_id})"
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}{where}")
