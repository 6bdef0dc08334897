"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its documented contract."""


class DataFormatError(ValueError):
    """A file on disk does not match its documented format."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values (NaN or Inf)."""
