"""Exception types shared across the package.

The CLI maps these onto its stable exit codes: configuration and format
problems exit 1, dataset/IO problems exit 2, numeric failures exit 3,
verification failures exit 4.
"""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed or corrupt weight file."""


class DatasetError(ValueError):
    """Dataset layout or content problem."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ResourceLimitError(RuntimeError):
    """Operation rejected because it would exceed a hard resource guard."""
