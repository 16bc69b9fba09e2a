"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ConfigError(ValueError):
    """Raised for inconsistent or unusable configuration."""


class DataError(RuntimeError):
    """Raised when input data cannot be found or decoded."""
