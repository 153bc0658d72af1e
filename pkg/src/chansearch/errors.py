"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, unknown identifiers, out-of-range values."""


class ParseError(ValueError):
    """Malformed text artifact (genotype, allocation, config)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LoadError(ValueError):
    """Malformed binary artifact (checkpoint, raw dataset)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"offset {offset}: {message}"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the run is aborted rather than patched."""
