"""Exception taxonomy shared across the package.

Four kinds cover every failure mode the public API is allowed to raise:
bad caller input, bad configuration, bad file contents, bad numerics.
The CLI maps ConfigError to exit code 1 and the rest to exit code 2.
"""


class InputError(ValueError):
    """Caller passed data that violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration value (file, dataclass field, CLI flag) is invalid."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""
