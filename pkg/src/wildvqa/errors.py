"""Exception types raised across the package."""


class VQAError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VQAError):
    pass


class DecodeError(VQAError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class CacheNotFoundError(VQAError, FileNotFoundError):
    pass


class CacheCorruptionError(VQAError):
    pass


class ShapeError(VQAError, ValueError):
    pass


class DomainError(VQAError, ValueError):
    pass


class NumericError(VQAError, ArithmeticError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class UndefinedCorrelationError(DomainError):
    pass


class FitError(VQAError):
    """Logistic fit did not converge; ``params`` holds the best iterate found."""

    def __init__(self, message, params=None, residual=None):
        super().__init__(message)
        self.params = params
        self.residual = residual


class ValidationError(VQAError, ValueError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class TrainingError(VQAError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(VQAError):
    pass
