"""Exception types raised across the package."""


class VoxalignError(Exception):
    """Base class for all package errors."""


class DegenerateInput(VoxalignError, ValueError):
    """A 6D rotation vector whose columns cannot be orthonormalized."""


class BadRange(VoxalignError, ValueError):
    pass


class BadFactor(VoxalignError, ValueError):
    pass


class ShapeMismatch(VoxalignError, ValueError):
    pass


class BadConfig(VoxalignError, ValueError):
    pass


class NotScalarLoss(VoxalignError, ValueError):
    pass


class GraphConsumed(VoxalignError, RuntimeError):
    """backward() called twice on a graph whose buffers were already freed."""


class DivergenceDetected(VoxalignError, RuntimeError):
    def __init__(self, iteration, value, checkpoint=None):
        self.iteration = iteration
        self.value = value
        self.checkpoint = checkpoint
        msg = f"non-finite loss {value!r} at iteration {iteration}"
        if checkpoint is not None:
            msg += f"; last good checkpoint: {checkpoint}"
        super().__init__(msg)


class CorruptCheckpoint(VoxalignError, ValueError):
    pass


class BadVolumeFile(VoxalignError, ValueError):
    pass


class EmptyInput(VoxalignError, ValueError):
    pass
