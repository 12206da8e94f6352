"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class DegenerateScaleError(ArithmeticError):
    """A normalizer (variance, semi-variance, KDE bandwidth) is numerically zero."""


class MapError(ValueError):
    """Malformed or unsolvable maze description."""

    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.col = col


class OracleTooLargeError(RuntimeError):
    """Exhaustive enumeration would exceed the configured path budget."""
