"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible and cannot be broadcast."""


class UnsupportedSizeError(ValueError):
    """An extent falls outside what an operation supports (e.g. non power of two FFT)."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read back intact."""
