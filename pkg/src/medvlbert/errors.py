"""Exception hierarchy shared across the package."""


class MedVLBertError(Exception):
    """Base class for all package errors."""


class ContractError(MedVLBertError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(MedVLBertError):
    """Invalid configuration or incompatible run setup."""


class NumericError(MedVLBertError):
    """Training produced a non-finite value."""


class DataIntegrityError(MedVLBertError):
    """A persisted file failed validation."""


class VersionMismatchError(DataIntegrityError):
    pass


class CorruptFileError(DataIntegrityError):
    """File is truncated or structurally malformed."""


class HashMismatchError(DataIntegrityError):
    pass


class ShapeMismatchError(DataIntegrityError):
    """Stored tensor shapes disagree with the receiving model."""
