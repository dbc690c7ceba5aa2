"""Exception taxonomy shared across the package."""


class MultitransError(Exception):
    """Base class for all package errors."""


class ShapeError(MultitransError):
    """Operands have incompatible or invalid shapes."""


class NumericError(MultitransError):
    """A numeric domain violation (non-finite input, log of a non-positive value)."""


class ContractError(MultitransError):
    """A precondition of an operation was violated by the caller."""


class StateError(MultitransError):
    """An object was used in an invalid lifecycle state (e.g. a consumed tape)."""


class GenerationError(MultitransError):
    """Synthetic scene generation could not satisfy its constraints."""
