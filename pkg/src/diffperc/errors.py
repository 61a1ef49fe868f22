"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class ContractError(ValueError):
    """Raised when a caller violates a documented API contract."""
