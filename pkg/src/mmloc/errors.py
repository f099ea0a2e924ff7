"""Exception hierarchy shared across the package."""


class MmlocError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MmlocError, ValueError):
    pass


class DegenerateQueryError(MmlocError, ValueError):
    """A query vector is zero, so it cannot span a subspace or define a cosine."""


class ConfigError(MmlocError, ValueError):
    pass


class DataError(MmlocError, ValueError):
    pass


class CheckpointError(MmlocError):
    pass


class DivergenceError(MmlocError, RuntimeError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id
