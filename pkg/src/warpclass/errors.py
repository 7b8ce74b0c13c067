"""Exception types shared across the package."""


class DataError(ValueError):
    """Input data or configuration failed validation."""


class NumericalError(RuntimeError):
    """A numerical routine could not complete (factorization, optimizer)."""
