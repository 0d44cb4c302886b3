"""Exception types shared across the package."""


class EchoLabError(Exception):
    """Base class for all package errors."""


class ValidationError(EchoLabError, ValueError):
    """Input violates a data invariant (bad label, out-of-bounds span, ...)."""


class ParseError(ValidationError):
    """A configuration, rule or annotation file could not be parsed."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DuplicateIdError(ValidationError):
    pass


class TrainingError(EchoLabError, RuntimeError):
    """Training could not proceed (no positives, non-finite loss, ...)."""
