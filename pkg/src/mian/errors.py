"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UsageError(ValueError):
    """A function was called with an invalid argument or in an invalid state."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ValueError):
    """Input file does not follow the expected column layout."""


class DivergenceError(RuntimeError):
    """A training run produced a non-finite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
