class BurstSRError(Exception):
    """Base class for errors raised by burstsr."""


class DimensionError(BurstSRError, ValueError):
    """Tensor shapes are incompatible or not divisible as required."""


class ContractError(BurstSRError, ValueError):
    """An input violates a documented precondition (e.g. wrong color space)."""


class ConfigError(BurstSRError, ValueError):
    """Invalid configuration value or combination."""


class InputError(BurstSRError, ValueError):
    """Malformed or missing input data."""


class TrainingDiverged(BurstSRError, RuntimeError):
    """Loss became non-finite during training."""
