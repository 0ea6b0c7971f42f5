"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a config file, override, or config value is invalid."""


class DatasetError(RuntimeError):
    """Raised when a data source cannot provide any usable samples."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be loaded or does not match the config."""
