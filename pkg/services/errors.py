from typing import Any, Dict, Optional


class OryxError(Exception):
    """Base class for every error raised by the lab"""


class ContractViolation(OryxError, ValueError):
    """A shape, flag or precondition contract was broken by the caller"""


class NumericError(OryxError, ArithmeticError):
    """A non-finite value appeared; `node` names where it was first seen"""

    def __init__(self, message: str, node: Optional[str] = None, metrics: Optional[Dict[str, Any]] = None):
        self.node = node
        self.metrics = metrics or {}
        if node:
            message = f"{message} (node: {node})"
        super().__init__(message)


class DatasetLoadError(OryxError):
    """A container file could not be read back"""


class BadMagicError(DatasetLoadError):
    pass


class VersionMismatchError(DatasetLoadError):
    pass


class PrecisionMismatchError(DatasetLoadError):
    pass


class TruncatedFileError(DatasetLoadError):
    pass


class ChecksumError(DatasetLoadError):
    pass


class HeaderFormatError(DatasetLoadError):
    pass


class PayloadFormatError(DatasetLoadError):
    """The payload passed its checksum but does not describe valid records"""


class DegenerateInputError(OryxError, ValueError):
    """Statistics inputs that admit no meaningful answer"""


class SchemaMismatchError(OryxError, ValueError):
    """CSV inputs whose columns disagree"""
