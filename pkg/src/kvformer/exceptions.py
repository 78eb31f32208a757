"""Exception types raised across the package."""


class KVFormerError(Exception):
    pass


class ShapeError(KVFormerError, ValueError):
    pass


class NonFiniteError(KVFormerError, FloatingPointError):
    pass


class GraphError(KVFormerError, RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar loss, double backward)."""


class CapacityError(KVFormerError, ValueError):
    """Sequence longer than the model's ``max_len``."""


class ConfigError(KVFormerError, ValueError):
    pass


class DivergenceError(KVFormerError, RuntimeError):
    """Training produced a non-finite loss.

    ``report`` holds the last good :class:`~kvformer.training.RunReport`.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
