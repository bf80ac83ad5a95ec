"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Everything else is a plain ValueError.
"""


class ShapeError(ValueError):
    """Tensor/matrix dimensions do not line up."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class DataError(ValueError):
    """Input data failed parsing or validation."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the valid domain."""
