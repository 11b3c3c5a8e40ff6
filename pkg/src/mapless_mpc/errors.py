class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class SceneGenerationError(RuntimeError):
    """Raised when a random scene cannot satisfy its placement constraints."""


class ConfigError(ValueError):
    """Raised for malformed, unknown or out-of-range configuration entries."""
