"""Exception types shared across the package."""


class UsageError(ValueError):
    """Caller violated an operation contract (arity, shape, argument range)."""


class ExprParseError(ValueError):
    """Malformed expression text.

    ``position`` is the character offset of the offending token.
    """

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class DocumentError(ValueError):
    """Malformed loss document."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UnsupportedVersionError(DocumentError):
    """Loss document carries a version this build does not understand."""

    def __init__(self, version):
        super().__init__(f"unsupported loss document version: {version!r}")
        self.version = version


class ConfigError(ValueError):
    """Invalid configuration; names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class DivergenceError(RuntimeError):
    """Non-finite value encountered during an optimization step."""
