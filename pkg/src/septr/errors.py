"""Exception types shared across the package (tensor errors live in ``septr.tensor``)."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class InputLengthError(ValueError):
    """Signal too short for the requested transform."""


class ShapeError(ValueError):
    """Input grid incompatible with the model geometry."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class DataError(ValueError):
    """Malformed dataset, labels or paired inputs."""


class AudioFormatError(OSError):
    """Unreadable or unsupported audio file."""


class CheckpointError(OSError):
    """Corrupt checkpoint or one that does not match the expected configuration."""
