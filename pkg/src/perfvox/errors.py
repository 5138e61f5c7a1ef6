"""Exception hierarchy.

Errors deriving from :class:`ValidationError` describe bad inputs or
configuration and map to CLI exit code 2; everything else is a runtime
failure (exit code 1).
"""


class PerfvoxError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PerfvoxError):
    """Input or configuration rejected before any work is done."""


class ConfigError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class DomainError(ValidationError, ValueError):
    pass


class InvalidK(ValidationError, ValueError):
    pass


class IoError(PerfvoxError, OSError):
    pass


class MissingVolume(IoError):
    pass


class MalformedHeader(PerfvoxError):
    pass


class UnsupportedDatatype(PerfvoxError):
    pass


class DimensionalityError(PerfvoxError):
    pass


class DegenerateInput(PerfvoxError, ValueError):
    pass


class ShapeMismatch(PerfvoxError, ValueError):
    pass


class LengthMismatch(PerfvoxError, ValueError):
    pass


class EmptySelection(PerfvoxError):
    pass


class NonFinite(PerfvoxError, FloatingPointError):
    pass


class BinCoverageError(PerfvoxError):
    pass


class UnusableCell(PerfvoxError):
    pass
