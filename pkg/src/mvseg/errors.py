"""Exception hierarchy shared by all modules.

The CLI maps :class:`InputError` to exit code 2 and :class:`NumericalError`
to exit code 1.
"""


class SegmentationError(Exception):
    """Base class for every error raised by mvseg; ``path`` names the offending file, if any."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class InputError(SegmentationError, ValueError):
    """Bad user input: unreadable file, inconsistent geometry, invalid parameter."""


class NumericalError(SegmentationError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""
