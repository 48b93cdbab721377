"""Exception types shared across the package."""


class FormatError(ValueError):
    """Base class for malformed or unsupported files."""

    code = 10


class BadMagicError(FormatError):
    code = 11


class BadVersionError(FormatError):
    code = 12


class TruncatedFileError(FormatError):
    code = 13


class UnsupportedFormatError(FormatError):
    code = 14


class SpecHashMismatchError(FormatError):
    code = 15


class NonFiniteError(ValueError, FloatingPointError):
    """A NaN or infinity reached a tensor that must stay finite."""
