"""Exception types shared across the package.

File-format errors carry a distinct integer ``code`` so callers (and the CLI)
can tell corruption modes apart without string matching.
"""


class GapolabError(Exception):
    """Base class for all package errors."""


class ShapeError(GapolabError, ValueError):
    pass


class NumericError(GapolabError, ArithmeticError):
    pass


class FileFormatError(GapolabError):
    code = 10


class MagicError(FileFormatError):
    code = 11


class VersionError(FileFormatError):
    code = 12


class TruncatedError(FileFormatError):
    code = 13


class ChecksumError(FileFormatError):
    code = 14


class ConfigError(GapolabError, ValueError):
    """Invalid run configuration (unknown key, bad type or out-of-range value)."""


class DataError(GapolabError):
    """Missing or malformed input data."""
