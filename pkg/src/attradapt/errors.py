"""Exception types shared across the package.

The CLI maps these onto process exit codes: config/usage errors exit 2,
data-format errors exit 3, numerical failures exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. labels where none may exist)."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class DataFormatError(ValueError):
    """Malformed dataset file or checkpoint."""


class NumericalError(RuntimeError):
    """Non-finite value encountered where finite math is required."""
