"""Exception types shared across the package.

The CLI maps ConfigError to exit code 1 and NumericError to exit code 2;
everything else is a plain bug.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class NumericError(RuntimeError):
    """A non-finite value showed up where the math guarantees finite ones."""
