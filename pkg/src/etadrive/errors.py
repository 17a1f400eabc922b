"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an API precondition (not a data problem)."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class ConfigError(ValueError):
    """Unknown mode, scenario kind, or config key."""
