"""Exception types shared across the package."""


class PimmError(Exception):
    """Base class for all package errors."""


class ShapeError(PimmError, ValueError):
    pass


class NumericError(PimmError, ArithmeticError):
    """A non-finite value appeared in a forward value, gradient or loss."""


class ContractError(PimmError, ValueError):
    """A caller broke an operation precondition (missing labels, non-scalar loss, ...)."""


class ValidationError(PimmError, ValueError):
    """Input data failed validation.

    ``rows`` holds the 1-based data row numbers that were rejected, when known.
    """

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class ParseError(PimmError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(PimmError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
