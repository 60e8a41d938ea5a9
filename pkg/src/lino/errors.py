"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text: ConfigError and DimensionError are
usage problems, DataError covers bad or missing inputs, NonFiniteError
signals numerical failure at run time.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DimensionError(ValueError):
    """Array shapes incompatible with the declared contract."""


class DataError(ValueError):
    """Input data missing, malformed, or too short to use."""


class CheckpointError(DataError):
    """Checkpoint file corrupt, truncated, or of the wrong format."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient stopped being finite."""
