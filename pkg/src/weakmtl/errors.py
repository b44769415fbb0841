"""Exception types shared across the library."""


class WeakMtlError(Exception):
    """Base class for all library errors."""


class InvalidInput(WeakMtlError):
    """Operation called with data that violates its preconditions."""


class InvalidConfig(WeakMtlError):
    """Configuration values are inconsistent or out of range."""


class ShapeError(WeakMtlError):
    """Array shapes do not match the declared layer or loss contract."""


class ParseError(WeakMtlError):
    """A file could not be parsed; message carries the offending location."""


class VocabularyError(WeakMtlError):
    """Label outside the scene/event vocabulary, or inconsistent labels."""


class IoError(WeakMtlError):
    """A required file is missing or unreadable."""


class SplitError(WeakMtlError):
    """Dataset cannot be split as requested (e.g. a scene with one clip)."""


class NumericsError(WeakMtlError):
    """Non-finite value encountered during training."""
