"""Exception types shared across the package.

Kernel overflow uses the builtin ``OverflowError`` and a zero-cost AoC uses
``ZeroDivisionError``; everything else is defined here.
"""


class InvalidOperand(ValueError):
    """A multiplication operand is NaN or infinite."""


class InvalidParam(ValueError):
    """A parameter is outside its documented range."""


class ShapeError(ValueError):
    """Tensor or layer shapes do not chain."""


class FormatError(ValueError):
    """A model file or image is malformed."""


class UnsupportedFormat(FormatError):
    """A well-formed file that uses a feature we do not decode."""


class IngestError(RuntimeError):
    """A dataset manifest references a missing file or a bad label."""

    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line


class EmptyDataset(ValueError):
    """An operation needs at least one labeled item."""
