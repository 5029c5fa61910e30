"""Exception hierarchy shared across the package."""


class FvclustError(Exception):
    """Base class for all package errors."""


class ValidationError(FvclustError, ValueError):
    """Invalid user input, configuration, or model state."""


class SchemaError(ValidationError):
    """A column-role schema does not match the input file."""


class NumericalError(FvclustError, ArithmeticError):
    """A factorization failed even after the jitter retry."""
