"""Exception types shared across the package."""


class Fer3dError(Exception):
    """Base class for all package errors."""


class DimensionError(Fer3dError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(Fer3dError):
    """An argument violates a documented precondition."""


class ConfigError(Fer3dError):
    """A model configuration is internally inconsistent."""


class DataError(Fer3dError):
    """A dataset, manifest, or landmark file is malformed or incomplete."""


class FormatError(Fer3dError):
    """A serialized tensor or checkpoint file is corrupt or truncated."""


class CompatibilityError(Fer3dError):
    """A checkpoint does not match the active configuration."""
