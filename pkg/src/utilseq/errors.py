"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
data errors exit 3, numeric failures exit 4.
"""


class UtilseqError(Exception):
    """Base class for all toolkit errors."""


class ParseError(UtilseqError):
    """Malformed input file; carries enough context to find the bad record."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}: "
        elif path is not None:
            loc += " "
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class ValidationError(UtilseqError):
    """Structurally well-formed data that violates an invariant."""


class DomainError(UtilseqError):
    """An argument outside the domain an operation is defined on."""


class ConfigError(UtilseqError):
    """Inconsistent or incomplete run configuration."""


class NumericError(UtilseqError):
    """A numeric computation produced NaN/Inf or otherwise failed."""
