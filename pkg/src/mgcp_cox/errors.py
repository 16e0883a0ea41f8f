"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or parameters violate a documented contract."""


class NumericalError(ArithmeticError):
    """A factorization or evaluation failed numerically.

    ``component`` names the matrix or model term that failed, when known.
    """

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
