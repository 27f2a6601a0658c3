"""Exception types shared across the package."""


class SpotError(Exception):
    """Base class for all package errors."""


class ShapeError(SpotError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SpotError):
    """A documented precondition or call contract was violated."""


class ConfigError(SpotError):
    """Inconsistent or out-of-range configuration values."""


class ConfigParseError(ConfigError):
    """A config file line could not be parsed or names an unknown key."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class HierarchyError(SpotError):
    """A later-stage mask retains a token pruned at an earlier stage."""


class CheckpointError(SpotError):
    """A checkpoint file is malformed or does not match the model."""


class NumericsError(SpotError):
    """A non-finite value (NaN/Inf) appeared where finiteness is guaranteed."""
