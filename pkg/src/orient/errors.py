"""Exception types raised across the package."""


class OrientError(Exception):
    """Base class for all package errors."""


class DegenerateInput(OrientError, ValueError):
    pass


class InvalidK(OrientError, ValueError):
    pass


class EmptyImage(OrientError, ValueError):
    pass


class FormatError(OrientError):
    """A file does not follow its binary layout (bad magic, truncated, ...)."""


class VersionError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class IoError(OrientError, OSError):
    pass


class ShapeMismatch(OrientError, ValueError):
    pass


class ConfigMismatch(OrientError, ValueError):
    pass


class InsufficientReferences(OrientError, ValueError):
    pass


class NonFiniteLoss(OrientError, FloatingPointError):
    pass


class EmptyEval(OrientError, ValueError):
    pass
