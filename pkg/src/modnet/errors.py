"""Exception taxonomy shared across the package."""


class ModnetError(Exception):
    """Base class for all package errors."""


class ShapeError(ModnetError, ValueError):
    """Operand dimensions are invalid for the requested operation."""


class ConfigError(ModnetError, ValueError):
    """A configuration value or key is invalid."""


class ContractError(ModnetError, ValueError):
    """A caller violated an API precondition."""


class DataError(ModnetError, ValueError):
    """Dataset contents are invalid or insufficient."""


class FormatError(ModnetError, ValueError):
    """A serialized file does not match its expected format."""


class SizeLimitError(ModnetError, RuntimeError):
    """A resource limit was exceeded and the operation was refused."""


class TrainingError(ModnetError, RuntimeError):
    """Training aborted due to a runtime fault such as non-finite gradients."""
