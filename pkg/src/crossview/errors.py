"""Exception types shared across the package."""


class CrossviewError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossviewError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(CrossviewError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(CrossviewError):
    """Input is numerically degenerate (e.g. zero-norm vector)."""


class NumericalError(CrossviewError):
    """A computation produced non-finite values or diverged."""


class FileFormatError(CrossviewError):
    """A file does not conform to its documented on-disk format."""
