"""Exception hierarchy shared across the package."""


class RalError(Exception):
    """Base class for all errors raised by ral."""


class DimensionError(RalError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RalError, ValueError):
    """A documented precondition was violated."""


class LabelError(RalError, ValueError):
    """A class label is outside ``[0, num_classes)``."""


class NumericError(RalError, FloatingPointError):
    """A forward op produced NaN/Inf. ``op`` names the offending op."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class FormatError(RalError, ValueError):
    """A file does not follow the RALT / checkpoint layout."""


class ManifestError(RalError, ValueError):
    """A dataset manifest line is malformed or references a missing file."""
