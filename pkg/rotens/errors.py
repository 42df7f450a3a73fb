class RotensError(Exception):
    """Base class for errors that map onto a CLI exit code."""

    exit_code = 1


class ConfigError(RotensError):
    exit_code = 2


class DataError(RotensError):
    exit_code = 3


class NumericError(RotensError):
    """A numeric self-check (invariance, equivariance, gradients) failed."""

    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record  # partial RunRecord at the time of divergence


class ShapeError(RotensError, ValueError):
    pass


class SizeError(ShapeError):
    pass


class TapeStateError(RotensError, RuntimeError):
    pass
