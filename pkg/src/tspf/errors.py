"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ShapeError(ContractError):
    """Array dimensions are incompatible."""


class LoadError(ContractError):
    """A data or config file could not be read."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
