"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ContractError(RuntimeError):
    """An operation was called outside its usage contract."""


class ConfigError(ValueError):
    """Invalid model, patch or experiment configuration."""


class DataError(ValueError):
    """Dataset is malformed or too short for the requested split."""


class TransferError(ValueError):
    """Source and target datasets cannot be paired for zero-shot transfer."""
