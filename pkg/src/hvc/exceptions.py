"""Exception types raised across the package."""


class HVCError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HVCError, ValueError):
    pass


class RetriesExhausted(HVCError):
    """No crop pair met the overlap requirement within the retry budget."""


class NonFiniteGradient(HVCError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class StoreMismatch(HVCError, KeyError):
    pass


class EmptyNegativeSet(HVCError, ValueError):
    pass


class DegenerateBatch(HVCError, FloatingPointError):
    pass


class ConfigError(HVCError, ValueError):
    pass


class CheckpointError(HVCError, ValueError):
    pass


class MissingFrame(HVCError, FileNotFoundError):
    pass


class ClassMismatch(HVCError, ValueError):
    pass
